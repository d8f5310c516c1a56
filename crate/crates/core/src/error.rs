use thiserror::Error;

/// Errors raised by the solvers, the lifted-controller algebra and the
/// optimization loops.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension {
        context: &'static str,
        detail: String,
    },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("{context}: spectral radius {rho} is not below one")]
    Unstable { context: &'static str, rho: f64 },

    #[error("rank deficiency in {context}: smallest singular value {sigma_min:e}")]
    RankDeficient {
        context: &'static str,
        sigma_min: f64,
    },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("history representation: {0}")]
    Representation(String),

    #[error("rollout diverged at step {step} (state norm {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("gradient estimate failed: {0}")]
    Estimation(String),

    #[error("iterate {iteration} left the stabilizing set{}", rho.map(|r| format!(" (closed-loop spectral radius {r})")).unwrap_or_default())]
    StabilityViolation { iteration: usize, rho: Option<f64> },

    #[error("degenerate closed-loop covariance: smallest singular value {sigma_min:e}")]
    DegenerateCovariance { sigma_min: f64 },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(&'static str),

    #[error("annealing stalled at gamma = {gamma}: {reason}")]
    AnnealStall { gamma: f64, reason: String },

    #[error("annealing used all {outer} outer iterations and stopped at gamma = {gamma}")]
    AnnealBudget { outer: usize, gamma: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            context,
            detail: detail.into(),
        }
    }
}
