use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pglqg_cli::{commands, run, Command, Experiment};

#[derive(Parser)]
#[command(name = "pglqg", version, about = "Policy-gradient LQG experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check dimensions, ranks and history lengths.
    Validate(Common),
    /// Exact-gradient descent, one trace per history length.
    ModelBased(Common),
    /// Zeroth-order policy gradient from rollouts.
    ModelFree(Common),
    /// Discount annealing; writes the trace and the learned K0.
    Anneal(Common),
    /// Model-based runs over the p-list plus a summary table.
    SweepP(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `run.out`.
    #[arg(long, env = "PGLQG_OUT")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Validate(c) => (Command::Validate, c),
        Cmd::ModelBased(c) => (Command::ModelBased, c),
        Cmd::ModelFree(c) => (Command::ModelFree, c),
        Cmd::Anneal(c) => (Command::Anneal, c),
        Cmd::SweepP(c) => (Command::SweepP, c),
    };
    let mut exp = match Experiment::load(&common.config) {
        Ok(exp) => exp,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    if let Some(seed) = common.seed {
        exp.seed = seed;
    }
    exp.out = common.out.unwrap_or_else(|| exp.resolve(&exp.out));

    if command == Command::Validate {
        let report = commands::validate(&exp);
        for line in &report.lines {
            println!("{line}");
        }
        return if report.ok { ExitCode::SUCCESS } else { ExitCode::from(2) };
    }
    match run(command, &exp) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
