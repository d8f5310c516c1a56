//! One-point zeroth-order gradient estimation over Frobenius-sphere
//! perturbations and the model-free descent loop built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::history_repr::{closed_loop_radius, HistoryRepr, LiftedController};
use crate::linalg::Mat;
use crate::lqg_model::{controller_cost, CostWeights, LqgSolution, PlantModel};
use crate::pg_model_based::evaluate;
use crate::simulator::{derive_seed, RolloutConfig, Simulator};

const STREAM_DIRECTION: u64 = 0;
const STREAM_NOISE: u64 = 1;

#[derive(Debug, Clone)]
pub struct ZoConfig {
    pub n_s: usize,
    pub r: f64,
    pub eta: f64,
    pub iterations: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Nominal failure probability, used only by the reported schedules.
    pub delta: f64,
    pub c_est: f64,
    /// Defaults to `1/r` when unset.
    pub sigma_r: Option<f64>,
    /// Fresh directions tried for a sample whose evaluation diverged.
    pub max_retries: usize,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self {
            n_s: 1000,
            r: 0.1,
            eta: 5e-9,
            iterations: 200,
            horizon: 100,
            seed: 0,
            delta: 0.05,
            c_est: 1.0,
            sigma_r: None,
            max_retries: 3,
        }
    }
}

impl ZoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s == 0 {
            return Err(Error::InvalidInput("n_s must be at least 1".into()));
        }
        if !(self.r > 0.0) {
            return Err(Error::InvalidInput(format!("smoothing radius must be positive, got {}", self.r)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidInput(format!("step size must be positive, got {}", self.eta)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput("delta must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn sigma_r(&self) -> f64 {
        self.sigma_r.unwrap_or(1.0 / self.r)
    }
}

/// Uniform draw from the sphere `‖U‖_F = r` in `ℝ^{rows×cols}`.
pub fn sample_sphere<R: Rng + ?Sized>(rows: usize, cols: usize, r: f64, rng: &mut R) -> Mat {
    loop {
        let g = Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 {
            return g * (r / norm);
        }
    }
}

/// Scalar objective queried by the estimator. `stream` keys the evaluation
/// noise. Returning [`Error::Divergence`] or [`Error::Unstable`] marks the
/// perturbed controller as rejected.
pub trait CostOracle: Sync {
    fn cost(&self, ktilde: &LiftedController, stream: u64) -> Result<f64>;
}

/// Finite-horizon rollout cost, damped when `gamma < 1`.
#[derive(Debug, Clone)]
pub struct RolloutOracle {
    pub sim: Simulator,
    pub rollout: RolloutConfig,
    pub gamma: f64,
}

impl RolloutOracle {
    pub fn new(plant: &PlantModel, cost: &CostWeights, p: usize, horizon: usize, gamma: f64) -> Result<Self> {
        Ok(Self {
            sim: Simulator::new(plant, cost)?,
            rollout: RolloutConfig::new(horizon, p, 0),
            gamma,
        })
    }
}

impl CostOracle for RolloutOracle {
    fn cost(&self, ktilde: &LiftedController, stream: u64) -> Result<f64> {
        self.sim
            .rollout_cost_damped(ktilde, self.gamma, &self.rollout.with_seed(stream))
    }
}

/// Noise-free analytic cost.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticOracle<'a> {
    pub repr: &'a HistoryRepr,
    pub sol: &'a LqgSolution,
    pub cost: &'a CostWeights,
}

impl CostOracle for AnalyticOracle<'_> {
    fn cost(&self, ktilde: &LiftedController, _stream: u64) -> Result<f64> {
        Ok(controller_cost(ktilde, self.repr, self.sol, self.cost)? + self.sol.offset())
    }
}

/// `f(K) = ‖K‖_F²`, whose smoothed gradient is exactly `2K`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrobeniusSquared;

impl CostOracle for FrobeniusSquared {
    fn cost(&self, ktilde: &LiftedController, _stream: u64) -> Result<f64> {
        Ok(ktilde.gain().norm_squared())
    }
}

enum Sample {
    Accepted { j: f64, u: Mat, rejected: usize },
    Exhausted(usize),
}

fn is_rejection(e: &Error) -> bool {
    matches!(e, Error::Divergence { .. } | Error::Unstable { .. })
}

#[derive(Debug, Clone)]
pub struct ZoEstimate {
    pub gradient: Mat,
    /// Number of rejected evaluations that were resampled.
    pub n_diverged: usize,
    /// Mean of the accepted `J(K̃ + U_i)`.
    pub mean_cost: f64,
}

/// `(d / (n_s r²)) Σ_i J(K̃ + U_i) U_i` with `d = rows · cols` of `K̃`.
///
/// Sample `i` of `iteration` draws its direction and its rollout noise from
/// streams keyed by `(seed, iteration, i, retry)`, so results do not depend on
/// evaluation order. A rejected sample is redrawn up to `max_retries` times.
pub fn zo_estimate(
    ktilde: &LiftedController,
    oracle: &dyn CostOracle,
    cfg: &ZoConfig,
    iteration: u64,
) -> Result<ZoEstimate> {
    cfg.validate()?;
    let (rows, cols) = ktilde.gain().shape();
    let samples: Vec<Sample> = (0..cfg.n_s)
        .into_par_iter()
        .map(|i| {
            for retry in 0..=cfg.max_retries {
                let key = [iteration, i as u64, retry as u64];
                let dir_seed = derive_seed(cfg.seed, &[key[0], key[1], key[2], STREAM_DIRECTION]);
                let u = sample_sphere(rows, cols, cfg.r, &mut ChaCha8Rng::seed_from_u64(dir_seed));
                let noise = derive_seed(cfg.seed, &[key[0], key[1], key[2], STREAM_NOISE]);
                match oracle.cost(&ktilde.offset_by(&u)?, noise) {
                    Ok(j) => return Ok(Sample::Accepted { j, u, rejected: retry }),
                    Err(e) if is_rejection(&e) => continue,
                    Err(e) => return Err(e),
                }
            }
            Ok(Sample::Exhausted(i))
        })
        .collect::<Result<_>>()?;

    if samples
        .iter()
        .all(|s| !matches!(s, Sample::Accepted { rejected: 0, .. }))
    {
        return Err(Error::StabilityViolation {
            iteration: iteration as usize,
            rho: None,
        });
    }

    let mut sum = Mat::zeros(rows, cols);
    let mut cost_sum = 0.0;
    let mut n_diverged = 0;
    for s in samples {
        match s {
            Sample::Accepted { j, u, rejected } => {
                sum += u * j;
                cost_sum += j;
                n_diverged += rejected;
            }
            Sample::Exhausted(i) => {
                return Err(Error::Estimation(format!(
                    "sample {i} diverged on all {} attempts",
                    cfg.max_retries + 1
                )))
            }
        }
    }
    let d = (rows * cols) as f64;
    Ok(ZoEstimate {
        gradient: sum * (d / (cfg.n_s as f64 * cfg.r * cfg.r)),
        n_diverged,
        mean_cost: cost_sum / cfg.n_s as f64,
    })
}

/// The same estimator evaluated over caller-supplied directions, each of
/// Frobenius norm `r`. Evaluation `i` uses noise stream `derive_seed(seed, [i])`.
pub fn one_point_estimate(
    ktilde: &LiftedController,
    oracle: &dyn CostOracle,
    directions: &[Mat],
    r: f64,
    seed: u64,
) -> Result<Mat> {
    if directions.is_empty() {
        return Err(Error::InvalidInput("no directions supplied".into()));
    }
    let (rows, cols) = ktilde.gain().shape();
    let terms = directions
        .par_iter()
        .enumerate()
        .map(|(i, u)| Ok(u * oracle.cost(&ktilde.offset_by(u)?, derive_seed(seed, &[i as u64]))?))
        .collect::<Result<Vec<Mat>>>()?;
    let sum = terms.into_iter().fold(Mat::zeros(rows, cols), |acc, t| acc + t);
    let d = (rows * cols) as f64;
    Ok(sum * (d / (directions.len() as f64 * r * r)))
}

/// Gradient information for one model-free step.
#[derive(Debug, Clone)]
pub struct GradientSample {
    pub gradient: Mat,
    pub empirical_cost: f64,
    pub n_diverged: usize,
}

pub trait GradientSource {
    fn gradient(&mut self, ktilde: &LiftedController, iteration: usize) -> Result<GradientSample>;
}

pub struct ZoGradient<'a> {
    pub oracle: &'a dyn CostOracle,
    pub cfg: ZoConfig,
}

impl GradientSource for ZoGradient<'_> {
    fn gradient(&mut self, ktilde: &LiftedController, iteration: usize) -> Result<GradientSample> {
        let est = zo_estimate(ktilde, self.oracle, &self.cfg, iteration as u64)?;
        Ok(GradientSample {
            gradient: est.gradient,
            empirical_cost: est.mean_cost,
            n_diverged: est.n_diverged,
        })
    }
}

/// Exact gradient of the analytic cost in place of the estimator.
pub struct ExactGradient<'a> {
    pub repr: &'a HistoryRepr,
    pub sol: &'a LqgSolution,
    pub cost: &'a CostWeights,
}

impl GradientSource for ExactGradient<'_> {
    fn gradient(&mut self, ktilde: &LiftedController, iteration: usize) -> Result<GradientSample> {
        let eval = evaluate(ktilde, self.repr, self.sol, self.cost).map_err(|e| match e {
            Error::Unstable { rho, .. } => Error::StabilityViolation {
                iteration,
                rho: Some(rho),
            },
            other => other,
        })?;
        Ok(GradientSample {
            gradient: eval.gradient,
            empirical_cost: eval.cost,
            n_diverged: 0,
        })
    }
}

/// Model and optimum used to log true optimality gaps and stability.
#[derive(Debug, Clone, Copy)]
pub struct Diagnostics<'a> {
    pub plant: &'a PlantModel,
    pub repr: &'a HistoryRepr,
    pub sol: &'a LqgSolution,
    pub cost: &'a CostWeights,
}

#[derive(Debug, Clone, Copy)]
pub struct MfRecord {
    pub iter: usize,
    pub empirical_cost: f64,
    /// `J(K̃_n) − J(K̃*)` when diagnostics are available and `K̃_n` is stabilizing.
    pub gap: Option<f64>,
    pub est_grad_norm: f64,
    pub n_diverged: usize,
    pub eta: f64,
    pub rho_cl: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MfTrace {
    pub records: Vec<MfRecord>,
    pub controller: LiftedController,
    /// Iterations whose controller failed the stabilizing-set test.
    pub stability_violations: Vec<usize>,
}

impl MfTrace {
    pub fn gaps(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.gap).collect()
    }
}

/// `K̃_{n+1} = K̃_n − η ĝ_n` for `n < N`, logging iterates `0..=N`.
pub fn run_model_free(
    k0: &LiftedController,
    source: &mut dyn GradientSource,
    eta: f64,
    iterations: usize,
    diagnostics: Option<Diagnostics<'_>>,
) -> Result<MfTrace> {
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("step size must be positive, got {eta}")));
    }
    let j_star = diagnostics.map(|d| d.sol.optimal_controller_cost());
    let mut k = k0.clone();
    let mut records = Vec::with_capacity(iterations + 1);
    let mut violations = Vec::new();
    for n in 0..=iterations {
        let (gap, rho) = match diagnostics {
            Some(d) => {
                let rho = closed_loop_radius(&k, d.repr, d.plant, 1.0)?;
                if rho < 1.0 {
                    let j = controller_cost(&k, d.repr, d.sol, d.cost)?;
                    (Some(j - j_star.unwrap_or(0.0)), Some(rho))
                } else {
                    violations.push(n);
                    (None, Some(rho))
                }
            }
            None => (None, None),
        };
        let sample = source.gradient(&k, n)?;
        records.push(MfRecord {
            iter: n,
            empirical_cost: sample.empirical_cost,
            gap,
            est_grad_norm: sample.gradient.norm(),
            n_diverged: sample.n_diverged,
            eta,
            rho_cl: rho,
        });
        if n < iterations {
            k = k.offset_by(&(sample.gradient * -eta))?;
        }
    }
    Ok(MfTrace {
        records,
        controller: k,
        stability_violations: violations,
    })
}

/// Sample size, radius, step and iteration requirements for reaching an
/// `ε`-optimal controller with probability `1 − δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceSchedule {
    pub n_s_min: f64,
    pub r_max: f64,
    pub eta_max: f64,
    pub n_min: f64,
}

pub fn convergence_schedule(
    eps: f64,
    mu_pl: f64,
    lipschitz: f64,
    initial_gap: f64,
    cfg: &ZoConfig,
) -> Result<ConvergenceSchedule> {
    for (v, name) in [(eps, "eps"), (mu_pl, "mu_pl"), (lipschitz, "lipschitz"), (initial_gap, "initial gap")] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(format!("{name} must be positive and finite")));
        }
    }
    cfg.validate()?;
    let log_delta = (1.0 / cfg.delta).ln();
    let sigma_r = cfg.sigma_r();
    Ok(ConvergenceSchedule {
        n_s_min: 24.0 * cfg.c_est.powi(2) * mu_pl * sigma_r.powi(2) * log_delta.powi(2) / eps,
        r_max: (eps / (24.0 * mu_pl * lipschitz.powi(2))).sqrt(),
        eta_max: (1.0 / (4.0 * lipschitz)).min(mu_pl / 2.0),
        n_min: 4.0 * mu_pl / cfg.eta * (2.0 * initial_gap / eps).ln(),
    })
}

/// Requirements under which every iterate stays in `𝒦_α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilitySchedule {
    pub n_s_min: f64,
    pub r_max: f64,
    pub eta_max: f64,
}

pub fn stability_schedule(
    alpha: f64,
    initial_gap: f64,
    mu_pl: f64,
    lipschitz: f64,
    cfg: &ZoConfig,
) -> Result<StabilitySchedule> {
    for (v, name) in [(alpha, "alpha"), (mu_pl, "mu_pl"), (lipschitz, "lipschitz"), (initial_gap, "initial gap")] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(format!("{name} must be positive and finite")));
        }
    }
    cfg.validate()?;
    let log_delta = (1.0 / cfg.delta).ln();
    let sigma_r = cfg.sigma_r();
    Ok(StabilitySchedule {
        n_s_min: 4.0 * cfg.c_est.powi(2) * alpha * initial_gap * sigma_r.powi(2) * log_delta.powi(2)
            / (3.0 * mu_pl),
        r_max: (3.0 * mu_pl / (4.0 * alpha * initial_gap * lipschitz.powi(2))).sqrt(),
        eta_max: 1.0 / (4.0 * lipschitz),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history_repr::{build_repr, lift};
    use crate::lqg_model::solve_lqg;
    use crate::pg_model_based::{run_model_based, PgConfig};

    #[test]
    fn sphere_samples_have_radius_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &r in &[0.05, 1.0, 7.5] {
            let u = sample_sphere(2, 16, r, &mut rng);
            assert!((u.norm() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_objective_estimate_is_small() {
        struct Constant;
        impl CostOracle for Constant {
            fn cost(&self, _: &LiftedController, _: u64) -> Result<f64> {
                Ok(3.0)
            }
        }
        let k = LiftedController::zeros(1, 1, 1);
        let cfg = ZoConfig {
            n_s: 100_000,
            r: 1.0,
            ..ZoConfig::default()
        };
        let est = zo_estimate(&k, &Constant, &cfg, 0).unwrap();
        // Scale d·c/r² = 6 times a mean of unit vectors with norm ≈ 1/√n_s.
        assert!(est.gradient.norm() < 6.0 * 5.0 / (1e5f64).sqrt());
    }

    #[test]
    fn estimator_is_deterministic() {
        let k = LiftedController::new(Mat::from_row_slice(1, 2, &[1.0, -2.0]), 1).unwrap();
        let cfg = ZoConfig {
            n_s: 64,
            r: 0.5,
            seed: 17,
            ..ZoConfig::default()
        };
        let a = zo_estimate(&k, &FrobeniusSquared, &cfg, 3).unwrap();
        let b = zo_estimate(&k, &FrobeniusSquared, &cfg, 3).unwrap();
        assert_eq!(a.gradient, b.gradient);
        let c = zo_estimate(&k, &FrobeniusSquared, &cfg, 4).unwrap();
        assert_ne!(a.gradient, c.gradient);
    }

    #[test]
    fn always_rejecting_oracle_is_a_stability_violation() {
        struct Diverges;
        impl CostOracle for Diverges {
            fn cost(&self, _: &LiftedController, _: u64) -> Result<f64> {
                Err(Error::Divergence { step: 3, norm: 1e13 })
            }
        }
        let k = LiftedController::zeros(1, 1, 1);
        let cfg = ZoConfig {
            n_s: 8,
            ..ZoConfig::default()
        };
        assert!(matches!(
            zo_estimate(&k, &Diverges, &cfg, 5),
            Err(Error::StabilityViolation { iteration: 5, .. })
        ));
    }

    #[test]
    fn schedule_scaling_in_eps() {
        let cfg = ZoConfig::default();
        let a = convergence_schedule(1e-3, 2.0, 5.0, 0.1, &cfg).unwrap();
        let b = convergence_schedule(0.5e-3, 2.0, 5.0, 0.1, &cfg).unwrap();
        assert!((b.n_s_min / a.n_s_min - 2.0).abs() < 1e-12);
        let step = 4.0 * 2.0 / cfg.eta * 2f64.ln();
        assert!((b.n_min - a.n_min - step).abs() < 1e-6 * step);
        assert_eq!(a.eta_max, (1.0f64 / 20.0).min(1.0));
        let s = stability_schedule(10.0, 0.1, 2.0, 5.0, &cfg).unwrap();
        assert!(s.n_s_min > 0.0 && s.r_max > 0.0 && s.eta_max == 0.05);
    }

    #[test]
    fn exact_source_reproduces_fixed_step_descent() {
        let cost = CostWeights::identity(2, 2);
        let plant = PlantModel::benchmark();
        let sol = solve_lqg(&plant, &cost).unwrap();
        let repr = build_repr(&sol, 4).unwrap();
        let kstar = lift(&sol.k_star, &repr).unwrap();
        let k0 = kstar.offset_by(&Mat::from_element(2, 16, 0.01)).unwrap();
        let mut source = ExactGradient {
            repr: &repr,
            sol: &sol,
            cost: &cost,
        };
        let diag = Diagnostics {
            plant: &plant,
            repr: &repr,
            sol: &sol,
            cost: &cost,
        };
        let mf = run_model_free(&k0, &mut source, 0.01, 20, Some(diag)).unwrap();
        let cfg = PgConfig {
            eta: 0.01,
            line_search: false,
            max_iter: 20,
            grad_tol: 0.0,
            ..PgConfig::default()
        };
        let mb = run_model_based(&k0, &repr, &sol, &cost, &cfg).unwrap();
        for (a, b) in mf.records.iter().zip(&mb.gaps) {
            assert!((a.gap.unwrap() - b).abs() < 1e-12);
        }
        assert!((mf.controller.gain() - mb.controller.gain()).norm() < 1e-12);
    }
}
