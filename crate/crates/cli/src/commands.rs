use std::path::{Path, PathBuf};

use pglqg::annealing::{
    estimate_open_loop_radius, run_annealing, AnnealConfig, AnnealResult, DiscountedProblem,
    ModelBasedProblem, ModelFreeProblem,
};
use pglqg::history_repr::min_history_length;
use pglqg::lqg_model::controller_cost;
use pglqg::pg_model_based::{run_model_based, PgConfig, PgTrace};
use pglqg::simulator::Simulator;
use pglqg::zeroth_order::{run_model_free, Diagnostics, MfTrace, RolloutOracle, ZoConfig, ZoGradient};
use pglqg::{build_repr, lift, project, solve_lqg, Error, HistoryRepr, LiftedController, LqgSolution, PlantModel};

use crate::config::{Experiment, InnerSolver};
use crate::trace::{self, SweepRow};
use crate::{matrix_file, CliError};

fn numeric(context: impl Into<String>) -> impl FnOnce(Error) -> CliError {
    let context = context.into();
    move |source| CliError::run(context, source)
}

/// Plant with the rank conditions enforced.
pub fn checked_plant(exp: &Experiment) -> Result<PlantModel, CliError> {
    let p = &exp.plant;
    PlantModel::new(p.a().clone(), p.b().clone(), p.c().clone(), p.w().clone(), p.v().clone())
        .map_err(|e| CliError::Config(format!("plant: {e}")))
}

fn history_rule(exp: &Experiment, p: usize) -> Option<String> {
    let (nx, nu, ny) = (exp.plant.nx(), exp.plant.nu(), exp.plant.ny());
    let p_min = min_history_length(nx, nu, ny);
    (p < p_min).then(|| {
        format!(
            "line {}: history length p = {p} violates p >= max(n_y, ceil(n_x/n_u)) = {p_min}",
            exp.p_line
        )
    })
}

fn check_history(exp: &Experiment, ps: &[usize]) -> Result<(), CliError> {
    match ps.iter().find_map(|&p| history_rule(exp, p)) {
        Some(msg) => Err(CliError::Config(msg)),
        None => Ok(()),
    }
}

fn solution(exp: &Experiment, plant: &PlantModel) -> Result<LqgSolution, CliError> {
    Ok(solve_lqg(plant, &exp.cost)
        .map_err(numeric("LQG synthesis"))?
        .with_offset_mode(exp.offset_mode()))
}

fn ensure_out(exp: &Experiment) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&exp.out).map_err(|source| CliError::Io {
        path: exp.out.clone(),
        source,
    })?;
    Ok(&exp.out)
}

#[derive(Debug, Clone)]
pub struct Report {
    pub lines: Vec<String>,
    pub ok: bool,
}

pub fn validate(exp: &Experiment) -> Report {
    let plant = &exp.plant;
    let (nx, nu, ny) = (plant.nx(), plant.nu(), plant.ny());
    let mut lines = vec![format!("dimensions: n_x = {nx}, n_u = {nu}, n_y = {ny}")];
    let mut ok = true;
    let mut rank_line = |name: &str, rank: pglqg::Result<usize>| match rank {
        Ok(r) => {
            let pass = r == nx;
            ok &= pass;
            format!("{name} rank: {r} of {nx} ({})", if pass { "ok" } else { "FAILED" })
        }
        Err(e) => {
            ok = false;
            format!("{name} rank: error: {e}")
        }
    };
    let ctrb = rank_line("controllability", plant.controllability_rank());
    let obsv = rank_line("observability", plant.observability_rank());
    match plant.open_loop_radius() {
        Ok(rho) => lines.push(format!("open-loop spectral radius: {rho:.6}")),
        Err(e) => {
            ok = false;
            lines.push(format!("open-loop spectral radius: error: {e}"));
        }
    }
    lines.push(ctrb);
    lines.push(obsv);
    lines.push(format!("minimum history length: {}", min_history_length(nx, nu, ny)));

    let sol = if ok { solve_lqg(plant, &exp.cost).ok() } else { None };
    if ok && sol.is_none() {
        ok = false;
        lines.push("LQG synthesis: failed".into());
    }
    for &p in &exp.ps {
        if let Some(msg) = history_rule(exp, p) {
            ok = false;
            lines.push(format!("p = {p}: rejected, {msg}"));
            continue;
        }
        let Some(sol) = &sol else { continue };
        match build_repr(sol, p).and_then(|r| r.s_norm()) {
            Ok(s) => lines.push(format!("p = {p}: ||S*|| = {s:.6}")),
            Err(e) => {
                ok = false;
                lines.push(format!("p = {p}: error: {e}"));
            }
        }
    }
    lines.push(if ok { "all checks passed".into() } else { "validation FAILED".into() });
    Report { lines, ok }
}

fn anneal_config(exp: &Experiment) -> Result<AnnealConfig, CliError> {
    let a = exp.config.anneal.as_ref().ok_or_else(|| {
        CliError::Config("annealing requested but the config has no [anneal] section".into())
    })?;
    Ok(AnnealConfig {
        gamma0: a.gamma0,
        window: a.acceptance_window()?,
        max_outer: a.max_outer,
        bisection_steps: a.bisection_steps,
        gamma_tol: a.gamma_tol,
        canonical_output: true,
    })
}

/// Runs discount annealing; returns the result and the history length used.
pub fn anneal(exp: &Experiment) -> Result<(AnnealResult, usize), CliError> {
    let plant = checked_plant(exp)?;
    let cfg = anneal_config(exp)?;
    let section = exp.config.anneal.as_ref().expect("checked by anneal_config");
    let p = section.p.unwrap_or(exp.ps[0]);
    check_history(exp, &[p])?;
    let rho_a = plant.open_loop_radius().map_err(numeric("open-loop radius"))?;
    let mut problem: Box<dyn DiscountedProblem> = match section.inner {
        InnerSolver::ModelBased => Box::new(ModelBasedProblem::new(
            &plant,
            &exp.cost,
            p,
            PgConfig {
                eta: section.inner_eta.unwrap_or(1.0),
                max_iter: section.inner_max_iter,
                ..PgConfig::default()
            },
        )),
        InnerSolver::ModelFree => {
            let sim = Simulator::new(&plant, &exp.cost).map_err(numeric("simulator"))?;
            let mut zo = zo_config(exp);
            zo.iterations = section.inner_max_iter;
            if let Some(eta) = section.inner_eta {
                zo.eta = eta;
            }
            let mut problem = ModelFreeProblem::new(sim, p, zo, section.n_eval);
            problem.report_model = Some((plant.clone(), exp.cost.clone()));
            Box::new(problem)
        }
    };
    let rho = match (section.inner, cfg.gamma0) {
        (InnerSolver::ModelFree, None) => {
            let sim = Simulator::new(&plant, &exp.cost).map_err(numeric("simulator"))?;
            estimate_open_loop_radius(&sim, 20, 50, exp.seed, 2.0)
                .map_err(numeric("open-loop radius estimate"))?
        }
        _ => rho_a,
    };
    let result = run_annealing(problem.as_mut(), &cfg, rho).map_err(|e| match e {
        Error::InvalidInput(msg) => CliError::Config(format!("anneal: {msg}")),
        other => CliError::Run {
            context: "discount annealing".into(),
            source: other,
            code: 4,
        },
    })?;
    Ok((result, p))
}

pub fn cmd_anneal(exp: &Experiment) -> Result<Vec<PathBuf>, CliError> {
    let (result, _) = anneal(exp)?;
    let out = ensure_out(exp)?;
    let csv = out.join("anneal.csv");
    trace::write(&csv, &trace::anneal_csv(&result.trace))?;
    let k0 = out.join("k0.txt");
    matrix_file::write_matrix(&k0, result.controller.gain())?;
    Ok(vec![csv, k0])
}

/// Initial controller from `k0`, or from annealing when no file is given.
fn initial_controller(exp: &Experiment, k0: Option<&PathBuf>, section: &str) -> Result<LiftedController, CliError> {
    match k0 {
        Some(path) => {
            let path = exp.resolve(path);
            let gain = matrix_file::read_matrix(&path)?;
            let (nu, ny) = (exp.plant.nu(), exp.plant.ny());
            let block = nu + ny;
            if gain.nrows() != nu || gain.ncols() == 0 || gain.ncols() % block != 0 {
                return Err(CliError::Config(format!(
                    "{}: a {}x{} controller does not fit n_u = {nu}, n_y = {ny}",
                    path.display(),
                    gain.nrows(),
                    gain.ncols()
                )));
            }
            let p = gain.ncols() / block;
            LiftedController::new(gain, p).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
        None if exp.config.anneal.is_some() => Ok(anneal(exp)?.0.controller),
        None => Err(CliError::Config(format!(
            "no initial controller: set {section}.k0 to a matrix file \
             (for example the k0.txt written by `anneal`) or add an [anneal] section"
        ))),
    }
}

/// `K̃` re-expressed at history length `repr.p()` through its projected gain.
fn reexpress(k: &LiftedController, repr: &HistoryRepr, sol: &LqgSolution) -> Result<LiftedController, CliError> {
    if k.p() == repr.p() {
        return Ok(k.clone());
    }
    let source = build_repr(sol, k.p()).map_err(numeric("history representation of K0"))?;
    let gain = project(k, &source).map_err(numeric("projecting K0"))?;
    lift(&gain, repr).map_err(numeric("lifting K0"))
}

pub struct ModelBasedRun {
    pub p: usize,
    pub s_norm: f64,
    pub trace: PgTrace,
    pub csv: PathBuf,
}

pub fn model_based(exp: &Experiment) -> Result<Vec<ModelBasedRun>, CliError> {
    let plant = checked_plant(exp)?;
    check_history(exp, &exp.ps)?;
    let section = &exp.config.model_based;
    let sol = solution(exp, &plant)?;
    let init = initial_controller(exp, section.k0.as_ref(), "model_based")?;
    let out = ensure_out(exp)?.to_path_buf();
    let mut runs = Vec::new();
    for &p in &exp.ps {
        let ctx = format!("model-based p = {p}");
        let repr = build_repr(&sol, p).map_err(numeric(ctx.clone()))?;
        let k0 = reexpress(&init, &repr, &sol)?;
        let gap0 = controller_cost(&k0, &repr, &sol, &exp.cost).map_err(numeric(ctx.clone()))?
            - sol.optimal_controller_cost();
        let cfg = PgConfig {
            eta: section.eta,
            max_iter: section.max_iter,
            grad_tol: section.grad_tol,
            gap_tol: section.rel_gap_tol.map(|t| t * gap0),
            line_search: section.line_search,
            log_every: section.log_every,
            ..PgConfig::default()
        };
        let trace = run_model_based(&k0, &repr, &sol, &exp.cost, &cfg).map_err(|e| match e {
            Error::InvalidInput(msg) => CliError::Config(format!("model_based: {msg}")),
            other => CliError::run(ctx.clone(), other),
        })?;
        let csv = out.join(format!("model_based_p{p}.csv"));
        trace::write(&csv, &trace::model_based_csv(&trace.records))?;
        runs.push(ModelBasedRun {
            p,
            s_norm: repr.s_norm().map_err(numeric(ctx))?,
            trace,
            csv,
        });
    }
    Ok(runs)
}

pub fn cmd_model_based(exp: &Experiment) -> Result<Vec<PathBuf>, CliError> {
    Ok(model_based(exp)?.into_iter().map(|r| r.csv).collect())
}

pub fn sweep_rows(runs: &[ModelBasedRun]) -> Vec<SweepRow> {
    runs.iter()
        .map(|r| {
            let g0 = r.trace.initial_gap();
            SweepRow {
                p: r.p,
                s_norm: r.s_norm,
                iterations: r.trace.iterations(),
                iters_rel: r.trace.first_iteration_below(1e-4 * g0),
                iters_abs: r.trace.first_iteration_below(1e-4),
                initial_gap: g0,
                final_gap: r.trace.final_gap(),
                stop: r.trace.stop.as_str(),
            }
        })
        .collect()
}

pub fn cmd_sweep_p(exp: &Experiment) -> Result<Vec<PathBuf>, CliError> {
    let runs = model_based(exp)?;
    let summary = exp.out.join("sweep_p.csv");
    trace::write(&summary, &trace::sweep_csv(&sweep_rows(&runs)))?;
    let mut files: Vec<PathBuf> = runs.into_iter().map(|r| r.csv).collect();
    files.push(summary);
    Ok(files)
}

pub fn zo_config(exp: &Experiment) -> ZoConfig {
    let mf = &exp.config.model_free;
    ZoConfig {
        n_s: mf.n_s,
        r: mf.r,
        eta: mf.eta,
        iterations: exp.config.run.iterations,
        horizon: exp.config.run.horizon,
        seed: exp.seed,
        sigma_r: mf.sigma_r,
        max_retries: mf.max_retries,
        ..ZoConfig::default()
    }
}

pub struct ModelFreeRun {
    pub p: usize,
    pub trace: MfTrace,
    pub csv: PathBuf,
}

pub fn model_free(exp: &Experiment) -> Result<Vec<ModelFreeRun>, CliError> {
    let plant = checked_plant(exp)?;
    check_history(exp, &exp.ps)?;
    let cfg = zo_config(exp);
    cfg.validate().map_err(|e| CliError::Config(format!("model_free: {e}")))?;
    let sol = solution(exp, &plant)?;
    let init = initial_controller(exp, exp.config.model_free.k0.as_ref(), "model_free")?;
    let out = ensure_out(exp)?.to_path_buf();
    let mut runs = Vec::new();
    for &p in &exp.ps {
        let ctx = format!("model-free p = {p}");
        let repr = build_repr(&sol, p).map_err(numeric(ctx.clone()))?;
        let k0 = reexpress(&init, &repr, &sol)?;
        let oracle = RolloutOracle::new(&plant, &exp.cost, p, cfg.horizon, 1.0).map_err(numeric(ctx.clone()))?;
        let mut source = ZoGradient {
            oracle: &oracle,
            cfg: cfg.clone(),
        };
        let diagnostics = Diagnostics {
            plant: &plant,
            repr: &repr,
            sol: &sol,
            cost: &exp.cost,
        };
        let trace = run_model_free(&k0, &mut source, cfg.eta, cfg.iterations, Some(diagnostics))
            .map_err(numeric(ctx))?;
        let csv = out.join(format!("model_free_p{p}.csv"));
        trace::write(&csv, &trace::model_free_csv(&trace.records))?;
        runs.push(ModelFreeRun { p, trace, csv });
    }
    Ok(runs)
}

pub fn cmd_model_free(exp: &Experiment) -> Result<Vec<PathBuf>, CliError> {
    let runs = model_free(exp)?;
    if let Some(run) = runs.iter().find(|r| !r.trace.stability_violations.is_empty()) {
        let iteration = run.trace.stability_violations[0];
        let rho = run.trace.records[iteration].rho_cl;
        return Err(CliError::run(
            format!("model-free p = {} (trace written to {})", run.p, run.csv.display()),
            Error::StabilityViolation { iteration, rho },
        ));
    }
    Ok(runs.into_iter().map(|r| r.csv).collect())
}
