//! Experiment runner for `pglqg`: a TOML config in, CSV traces out.

pub mod commands;
pub mod config;
pub mod matrix_file;
pub mod trace;

use std::path::PathBuf;

use thiserror::Error;

pub use config::Experiment;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Run {
        context: String,
        source: pglqg::Error,
        code: u8,
    },
}

impl CliError {
    /// Numeric failure, or an annealing failure when the source is one.
    pub fn run(context: impl Into<String>, source: pglqg::Error) -> Self {
        let code = match source {
            pglqg::Error::AnnealStall { .. } | pglqg::Error::AnnealBudget { .. } => 4,
            _ => 3,
        };
        Self::Run {
            context: context.into(),
            source,
            code,
        }
    }

    /// 2 for configuration and file errors, 3 for numeric or stability
    /// failures, 4 for annealing failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Io { .. } => 2,
            Self::Run { code, .. } => *code,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    ModelBased,
    ModelFree,
    Anneal,
    SweepP,
}

/// Runs a command other than `validate` and returns the files it wrote.
pub fn run(command: Command, exp: &Experiment) -> Result<Vec<PathBuf>, CliError> {
    match command {
        Command::Validate => {
            let report = commands::validate(exp);
            if report.ok {
                Ok(Vec::new())
            } else {
                Err(CliError::Config(report.lines.join("\n")))
            }
        }
        Command::ModelBased => commands::cmd_model_based(exp),
        Command::ModelFree => commands::cmd_model_free(exp),
        Command::Anneal => commands::cmd_anneal(exp),
        Command::SweepP => commands::cmd_sweep_p(exp),
    }
}
