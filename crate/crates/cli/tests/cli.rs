use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pglqg::{build_repr, lift, solve_lqg, CostWeights, PlantModel};
use pglqg_cli::matrix_file::{read_matrix, write_matrix};
use pglqg_cli::trace::{data_rows, SCHEMA};
use tempfile::TempDir;

fn pglqg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pglqg"))
        .args(args)
        .current_dir(dir)
        .env_remove("PGLQG_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const BENCHMARK: &str = r#"
[plant]
preset = "paper_iv_a"

[history]
p = 4

[anneal]
"#;

const STABLE: &str = r#"
[plant]
a = [[0.5, 0.0], [0.0, 0.3]]
b = [[1.0, 0.0], [0.0, 1.0]]
c = [[1.0, 0.0], [0.0, 1.0]]
w = [[0.01, 0.0], [0.0, 0.01]]
v = [[0.01, 0.0], [0.0, 0.01]]

[history]
p = 2

[anneal]
"#;

#[test]
fn validate_reports_benchmark_spectrum() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[plant]\npreset = \"paper_iv_a\"\n[history]\np = [2, 4, 8]\n");
    let out = pglqg(&["validate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("open-loop spectral radius: 1.500004"), "{text}");
    assert!(text.contains("p = 8: ||S*||"));
}

#[test]
fn validate_rejects_zero_input_matrix() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &STABLE.replace("b = [[1.0, 0.0], [0.0, 1.0]]", "b = [[0.0, 0.0], [0.0, 0.0]]"));
    let out = pglqg(&["validate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("controllability rank: 0 of 2 (FAILED)"));
}

#[test]
fn short_history_cites_the_rule() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &BENCHMARK.replace("p = 4", "p = 1"));
    let out = pglqg(&["model-based", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("p >= max(n_y, ceil(n_x/n_u)) = 2"), "{err}");
    assert!(err.contains("line 6"), "{err}");
}

#[test]
fn unknown_keys_and_bad_shapes_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{BENCHMARK}\n[run]\nsede = 3\n"));
    let out = pglqg(&["anneal", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sede"));

    let cfg = write_config(dir.path(), &STABLE.replace("c = [[1.0, 0.0], [0.0, 1.0]]", "c = [[1.0, 0.0, 0.0]]"));
    let out = pglqg(&["validate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 5: c is 1x3, expected 1x2"), "{}", stderr(&out));
}

#[test]
fn missing_initial_controller_is_actionable() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &BENCHMARK.replace("[anneal]", ""));
    let out = pglqg(&["model-based", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("set model_based.k0"), "{}", stderr(&out));
}

#[test]
fn optimal_start_gives_single_row() {
    let dir = TempDir::new().unwrap();
    let plant = PlantModel::benchmark();
    let sol = solve_lqg(&plant, &CostWeights::identity(2, 2)).unwrap();
    let repr = build_repr(&sol, 4).unwrap();
    let kstar = lift(&sol.k_star, &repr).unwrap();
    write_matrix(&dir.path().join("kstar.txt"), kstar.gain()).unwrap();
    let cfg = write_config(
        dir.path(),
        "[plant]\npreset = \"paper_iv_a\"\n[history]\np = 4\n[model_based]\nk0 = \"kstar.txt\"\n",
    );
    let out = pglqg(&["model-based", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("out/model_based_p4.csv")).unwrap();
    assert!(csv.starts_with(SCHEMA));
    assert_eq!(data_rows(&csv).count(), 1);
}

#[test]
fn stable_plant_anneals_in_one_row() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), STABLE);
    let out = pglqg(&["anneal", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("out/anneal.csv")).unwrap();
    let rows: Vec<_> = data_rows(&csv).map(|r| r.iter().map(|s| s.to_string()).collect::<Vec<_>>()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "1");
}

#[test]
fn benchmark_anneal_reaches_one_and_k0_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), BENCHMARK);
    let out = pglqg(&["anneal", "--config", cfg.to_str().unwrap(), "--out", "a"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("a/anneal.csv")).unwrap();
    let last = data_rows(&csv).last().unwrap().iter().map(|s| s.to_string()).collect::<Vec<_>>();
    assert_eq!(last[1], "1");
    assert!(last[2].parse::<f64>().unwrap() < 1.0);

    let k0_path = dir.path().join("a/k0.txt");
    let k0 = read_matrix(&k0_path).unwrap();
    let again = dir.path().join("again.txt");
    write_matrix(&again, &k0).unwrap();
    assert_eq!(std::fs::read(&k0_path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(read_matrix(&again).unwrap(), k0);

    let cfg = write_config(
        dir.path(),
        "[plant]\npreset = \"paper_iv_a\"\n[history]\np = 4\n[model_based]\nk0 = \"a/k0.txt\"\nmax_iter = 50\n",
    );
    let out = pglqg(&["model-based", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("out/model_based_p4.csv")).unwrap();
    let gaps: Vec<f64> = data_rows(&csv).map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(gaps.len(), 51);
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn single_sample_model_free_is_valid_and_seeded() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{BENCHMARK}\n[model_free]\nn_s = 1\n\n[run]\niterations = 5\n"),
    );
    let run = |seed: &str, out_dir: &str| {
        let out = pglqg(
            &["model-free", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out_dir],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(dir.path().join(out_dir).join("model_free_p4.csv")).unwrap()
    };
    let a = run("7", "s7a");
    let b = run("7", "s7b");
    let c = run("8", "s8");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(data_rows(&text).count(), 6);
}

#[test]
fn output_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), STABLE);
    let out = Command::new(env!("CARGO_BIN_EXE_pglqg"))
        .args(["anneal", "--config", cfg.to_str().unwrap()])
        .current_dir(dir.path())
        .env("PGLQG_OUT", dir.path().join("from_env"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("from_env/anneal.csv").exists());
}

#[test]
fn anneal_stall_has_its_own_exit_code() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        &BENCHMARK.replace("[anneal]", "[anneal]\nwindow = \"printed\"\nmax_outer = 3"),
    );
    let out = pglqg(&["anneal", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}
