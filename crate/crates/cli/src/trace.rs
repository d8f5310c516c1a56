//! CSV trace files. Every file starts with the schema line [`SCHEMA`].

use std::fmt::Write as _;
use std::path::Path;

use pglqg::annealing::AnnealRecord;
use pglqg::pg_model_based::PgRecord;
use pglqg::zeroth_order::MfRecord;

use crate::CliError;

pub const SCHEMA: &str = "# pg-lqg-trace v1";

pub const MODEL_BASED_COLUMNS: &str = "iter,J,gap,grad_norm,rho_cl,mu_pl,eta_used";
pub const MODEL_FREE_COLUMNS: &str = "iter,empirical_J,gap,est_grad_norm,n_diverged,eta";
pub const ANNEAL_COLUMNS: &str = "outer_iter,gamma,rho_closed_loop,J_gamma";
pub const SWEEP_COLUMNS: &str =
    "p,s_norm,iterations,iters_rel_1e-4,iters_abs_1e-4,initial_gap,final_gap,stop";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn document(columns: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("{SCHEMA}\n{columns}\n");
    for row in rows {
        let _ = writeln!(s, "{row}");
    }
    s
}

pub fn model_based_csv(records: &[PgRecord]) -> String {
    document(
        MODEL_BASED_COLUMNS,
        records.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.iter, r.cost, r.gap, r.grad_norm, r.rho_cl, r.mu_pl, r.eta_used
            )
        }),
    )
}

pub fn model_free_csv(records: &[MfRecord]) -> String {
    document(
        MODEL_FREE_COLUMNS,
        records.iter().map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.iter,
                r.empirical_cost,
                opt(r.gap),
                r.est_grad_norm,
                r.n_diverged,
                r.eta
            )
        }),
    )
}

pub fn anneal_csv(records: &[AnnealRecord]) -> String {
    document(
        ANNEAL_COLUMNS,
        records.iter().map(|r| {
            format!("{},{},{},{}", r.outer, r.gamma, opt(r.rho_closed_loop), r.j_gamma)
        }),
    )
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub p: usize,
    pub s_norm: f64,
    pub iterations: usize,
    pub iters_rel: Option<usize>,
    pub iters_abs: Option<usize>,
    pub initial_gap: f64,
    pub final_gap: f64,
    pub stop: &'static str,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    document(
        SWEEP_COLUMNS,
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.p,
                r.s_norm,
                r.iterations,
                opt(r.iters_rel),
                opt(r.iters_abs),
                r.initial_gap,
                r.final_gap,
                r.stop
            )
        }),
    )
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Data rows of a trace, without the schema and column lines.
pub fn data_rows(contents: &str) -> impl Iterator<Item = Vec<&str>> {
    contents
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').collect())
}
