//! Exact policy gradient of the analytic cost, gradient-dominance and
//! smoothness diagnostics, and gradient descent with Armijo backtracking.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::history_repr::{project, HistoryRepr, LiftedController};
use crate::linalg::{min_singular_value, smith_doubling, spectral_norm, Mat};
use crate::lqg_model::{closed_loop_of_gain, CostWeights, LqgSolution};

/// Cost, gradient and closed-loop statistics of one lifted controller.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    /// `Tr(P_K̃ Σ_ν)` without the constant offset.
    pub controller_cost: f64,
    /// `Tr(P_K̃ Σ_ν) + c₀`
    pub cost: f64,
    pub gradient: Mat,
    /// `ρ(A + BK̃S*†)`
    pub rho: f64,
    /// Stationary estimate covariance `Σ_K̃ = A_cl Σ_K̃ A_clᵀ + Σ_ν`.
    pub sigma: Mat,
    /// `E_K̃ = (R + BᵀP_K̃B)K̃S*† + BᵀP_K̃A`
    pub residual: Mat,
}

impl PolicyEval {
    pub fn grad_norm(&self) -> f64 {
        self.gradient.norm()
    }
}

pub fn evaluate(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
) -> Result<PolicyEval> {
    let k = project(ktilde, repr)?;
    let cl = closed_loop_of_gain(&k, sol, cost)?;
    let sigma = smith_doubling(&cl.a_cl.transpose(), &sol.sigma_nu)?;
    let residual = cl.first_order_residual(sol, cost);
    let gradient = (&residual * &sigma * repr.sdag.transpose()) * 2.0;
    let controller_cost = cl.controller_cost(sol);
    Ok(PolicyEval {
        controller_cost,
        cost: controller_cost + sol.offset(),
        gradient,
        rho: cl.rho,
        sigma,
        residual,
    })
}

/// `∇J(K̃) = 2 E_K̃ Σ_K̃ S*†ᵀ`
pub fn exact_gradient(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
) -> Result<Mat> {
    Ok(evaluate(ktilde, repr, sol, cost)?.gradient)
}

/// Outcome of checking `J(K̃) − J(K̃*) ≤ μ_PL ‖∇J(K̃)‖_F²`.
#[derive(Debug, Clone, Copy)]
pub struct PlCertificate {
    pub mu_pl: f64,
    pub gap: f64,
    pub grad_sq: f64,
    pub satisfied: bool,
}

/// `μ_PL = ‖Σ_K̃*‖ ‖S*‖² / (4 σ̲(R) σ̲²(Σ_K̃))`
pub fn pl_constant(
    sigma: &Mat,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
) -> Result<f64> {
    let sigma_min = min_singular_value(sigma)?;
    if sigma_min <= 1e-14 * spectral_norm(sigma)?.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateCovariance { sigma_min });
    }
    let s_norm = repr.s_norm()?;
    let numerator = spectral_norm(&sol.sigma_star)? * s_norm * s_norm;
    Ok(numerator / (4.0 * min_singular_value(cost.r())? * sigma_min * sigma_min))
}

pub fn pl_certificate(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
) -> Result<PlCertificate> {
    let eval = evaluate(ktilde, repr, sol, cost)?;
    let mu_pl = pl_constant(&eval.sigma, repr, sol, cost)?;
    let gap = eval.controller_cost - sol.optimal_controller_cost();
    let grad_sq = eval.gradient.norm_squared();
    // Round-off floor so that the optimum itself certifies.
    let slack = 1e-12 * sol.optimal_controller_cost().abs();
    Ok(PlCertificate {
        mu_pl,
        gap,
        grad_sq,
        satisfied: gap <= mu_pl * grad_sq + slack,
    })
}

/// Local Lipschitz ratio `‖∇J(K₁) − ∇J(K₂)‖_F / ‖K₁ − K₂‖_F`.
pub fn smoothness_probe(
    k1: &LiftedController,
    k2: &LiftedController,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
) -> Result<f64> {
    let dist = (k1.gain() - k2.gain()).norm();
    if dist == 0.0 {
        return Err(Error::UndefinedRatio("smoothness probe at coincident controllers"));
    }
    let g1 = exact_gradient(k1, repr, sol, cost)?;
    let g2 = exact_gradient(k2, repr, sol, cost)?;
    Ok((g1 - g2).norm() / dist)
}

/// Controllers whose optimality gap is at most `bound`, i.e. `𝒦_α` with
/// `bound = α ΔJ*(K̃₀)`.
#[derive(Debug, Clone)]
pub struct SublevelSet<'a> {
    pub repr: &'a HistoryRepr,
    pub sol: &'a LqgSolution,
    pub cost: &'a CostWeights,
    pub bound: f64,
}

impl<'a> SublevelSet<'a> {
    pub fn new(
        repr: &'a HistoryRepr,
        sol: &'a LqgSolution,
        cost: &'a CostWeights,
        alpha: f64,
        initial_gap: f64,
    ) -> Result<Self> {
        if !(alpha >= 1.0) || !(initial_gap > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sublevel set needs alpha >= 1 and a positive initial gap (got {alpha}, {initial_gap})"
            )));
        }
        Ok(Self {
            repr,
            sol,
            cost,
            bound: alpha * initial_gap,
        })
    }

    pub fn gap(&self, ktilde: &LiftedController) -> Option<f64> {
        let k = project(ktilde, self.repr).ok()?;
        let cl = closed_loop_of_gain(&k, self.sol, self.cost).ok()?;
        Some(cl.controller_cost(self.sol) - self.sol.optimal_controller_cost())
    }

    pub fn contains(&self, ktilde: &LiftedController) -> bool {
        self.gap(ktilde).is_some_and(|g| g <= self.bound)
    }

    /// Draws `n` members as `center + t·D` with `D` a uniformly random unit
    /// direction and `t` uniform on the segment of the ray that stays inside
    /// the set (located by bisection). Draws that fall outside are rejected.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        center: &LiftedController,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<LiftedController>> {
        if !self.contains(center) {
            return Err(Error::InvalidInput("sublevel sampling center is outside the set".into()));
        }
        let (rows, cols) = center.gain().shape();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n.max(1) {
                return Err(Error::InvalidInput(
                    "sublevel sampling rejected too many draws".into(),
                ));
            }
            let mut dir = Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
            dir /= dir.norm();
            let at = |t: f64| center.offset_by(&(&dir * t));
            let (mut lo, mut hi) = (0.0, 1.0);
            while at(hi).is_ok_and(|k| self.contains(&k)) && hi < 1e6 {
                lo = hi;
                hi *= 2.0;
            }
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if at(mid).is_ok_and(|k| self.contains(&k)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t = lo * rng.random::<f64>();
            let candidate = at(t)?;
            if self.contains(&candidate) {
                out.push(candidate);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PgConfig {
    /// Fixed step, or the initial trial step of each backtracking search.
    pub eta: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Optional stop once `J(K̃_n) − J(K̃*) ≤ gap_tol`.
    pub gap_tol: Option<f64>,
    pub line_search: bool,
    /// Initial value of the running smoothness estimate.
    pub lipschitz_est: f64,
    pub alpha: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Keep every `log_every`-th record (the first and last are always kept).
    pub log_every: usize,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            max_iter: 10_000,
            grad_tol: 1e-10,
            gap_tol: None,
            line_search: true,
            lipschitz_est: 0.0,
            alpha: 10.0,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
            log_every: 1,
        }
    }
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidInput(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.alpha >= 1.0) {
            return Err(Error::InvalidInput(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidInput("backtracking shrink must lie in (0, 1)".into()));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidInput("Armijo constant must lie in (0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidInput("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradTol,
    GapTol,
    Budget,
    /// Backtracking shrank the step below any measurable decrease.
    StepCollapse,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::GradTol => "grad_tol",
            StopReason::GapTol => "gap_tol",
            StopReason::Budget => "budget",
            StopReason::StepCollapse => "step_collapse",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PgRecord {
    pub iter: usize,
    pub cost: f64,
    pub gap: f64,
    pub grad_norm: f64,
    pub rho_cl: f64,
    pub mu_pl: f64,
    /// Step accepted when leaving this iterate; 0 on the final record.
    pub eta_used: f64,
    /// `1 − 2η σ̲²(Σ_K̃) σ̲(R) / (‖Σ_K̃*‖ ‖S*‖²)` for the step taken.
    pub contraction: f64,
}

#[derive(Debug, Clone)]
pub struct PgTrace {
    pub records: Vec<PgRecord>,
    /// Optimality gap of every iterate, including those not kept in `records`.
    pub gaps: Vec<f64>,
    pub stop: StopReason,
    pub controller: LiftedController,
    /// Running max of the smoothness probe between consecutive iterates.
    pub lipschitz_est: f64,
    /// Smallest `σ̲(Σ_K̃)` over the visited iterates.
    pub min_sigma: f64,
    /// Steps where `η ≤ 1/lipschitz_est` held but the one-step contraction
    /// inequality did not.
    pub contraction_violations: Vec<usize>,
}

impl PgTrace {
    pub fn iterations(&self) -> usize {
        self.gaps.len() - 1
    }

    pub fn initial_gap(&self) -> f64 {
        self.gaps[0]
    }

    pub fn final_gap(&self) -> f64 {
        *self.gaps.last().expect("trace is never empty")
    }

    /// First iteration index whose gap is at most `tol`.
    pub fn first_iteration_below(&self, tol: f64) -> Option<usize> {
        self.gaps.iter().position(|&g| g <= tol)
    }

    pub fn is_monotone(&self) -> bool {
        self.gaps.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Iteration count `L_g‖Σ_K̃*‖‖S*‖² / (2σ̲(R) σ̲²_min(Σ)) · log(ΔJ₀/ε)`.
pub fn iteration_bound(
    lipschitz: f64,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
    min_sigma: f64,
    initial_gap: f64,
    eps: f64,
) -> Result<f64> {
    let s_norm = repr.s_norm()?;
    let prefactor = lipschitz * spectral_norm(&sol.sigma_star)? * s_norm * s_norm
        / (2.0 * min_singular_value(cost.r())? * min_sigma * min_sigma);
    Ok(prefactor * (initial_gap / eps).ln().max(0.0))
}

/// Gradient descent `K̃_{n+1} = K̃_n − η ∇J(K̃_n)` from a stabilizing `k0`.
///
/// With line search on, each step starts at `cfg.eta` and halves until the
/// iterate is stabilizing and satisfies the Armijo condition. With line search
/// off, a destabilizing step is reported as [`Error::StabilityViolation`].
pub fn run_model_based(
    k0: &LiftedController,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
    cfg: &PgConfig,
) -> Result<PgTrace> {
    cfg.validate()?;
    let j_star = sol.optimal_controller_cost();
    let sigma_star_norm = spectral_norm(&sol.sigma_star)?;
    let s_norm = repr.s_norm()?;
    let r_min = min_singular_value(cost.r())?;
    let contraction_scale = 2.0 * r_min / (sigma_star_norm * s_norm * s_norm);

    let mut k = k0.clone();
    let mut eval = evaluate(&k, repr, sol, cost).map_err(|e| match e {
        Error::Unstable { rho, .. } => Error::StabilityViolation {
            iteration: 0,
            rho: Some(rho),
        },
        other => other,
    })?;
    let mut records = Vec::new();
    let mut gaps = vec![eval.controller_cost - j_star];
    let mut lipschitz = cfg.lipschitz_est;
    let mut min_sigma = f64::INFINITY;
    let mut violations = Vec::new();

    let mut n = 0usize;
    let stop = loop {
        let gap = gaps[n];
        let sigma_min = min_singular_value(&eval.sigma)?;
        min_sigma = min_sigma.min(sigma_min);
        let mu_pl = pl_constant(&eval.sigma, repr, sol, cost)?;
        let mut record = PgRecord {
            iter: n,
            cost: eval.cost,
            gap,
            grad_norm: eval.grad_norm(),
            rho_cl: eval.rho,
            mu_pl,
            eta_used: 0.0,
            contraction: 1.0,
        };

        let stop = if record.grad_norm <= cfg.grad_tol {
            Some(StopReason::GradTol)
        } else if cfg.gap_tol.is_some_and(|tol| gap <= tol) {
            Some(StopReason::GapTol)
        } else if n >= cfg.max_iter {
            Some(StopReason::Budget)
        } else {
            None
        };
        if let Some(reason) = stop {
            records.push(record);
            break reason;
        }

        let (next_k, next_eval, eta) = match take_step(&k, &eval, repr, sol, cost, cfg, n)? {
            Some(step) => step,
            None => {
                records.push(record);
                break StopReason::StepCollapse;
            }
        };

        let contraction = 1.0 - eta * sigma_min * sigma_min * contraction_scale;
        let next_gap = next_eval.controller_cost - j_star;
        let step_norm = (next_k.gain() - k.gain()).norm();
        if step_norm > 0.0 {
            lipschitz = lipschitz.max((&next_eval.gradient - &eval.gradient).norm() / step_norm);
        }
        if lipschitz > 0.0 && eta <= 1.0 / lipschitz {
            let tol = 1e-12 * j_star.abs().max(1.0);
            if next_gap > contraction * gap + tol {
                violations.push(n);
            }
        }
        record.eta_used = eta;
        record.contraction = contraction;
        if n.is_multiple_of(cfg.log_every) {
            records.push(record);
        }

        k = next_k;
        eval = next_eval;
        gaps.push(next_gap);
        n += 1;
    };

    Ok(PgTrace {
        records,
        gaps,
        stop,
        controller: k,
        lipschitz_est: lipschitz,
        min_sigma,
        contraction_violations: violations,
    })
}

fn take_step(
    k: &LiftedController,
    eval: &PolicyEval,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
    cfg: &PgConfig,
    n: usize,
) -> Result<Option<(LiftedController, PolicyEval, f64)>> {
    let grad_sq = eval.gradient.norm_squared();
    if !cfg.line_search {
        let next = k.offset_by(&(&eval.gradient * -cfg.eta))?;
        return match evaluate(&next, repr, sol, cost) {
            Ok(e) => Ok(Some((next, e, cfg.eta))),
            Err(Error::Unstable { rho, .. }) => Err(Error::StabilityViolation {
                iteration: n + 1,
                rho: Some(rho),
            }),
            Err(other) => Err(other),
        };
    }
    let mut eta = cfg.eta;
    for _ in 0..=cfg.max_backtracks {
        let next = k.offset_by(&(&eval.gradient * -eta))?;
        match evaluate(&next, repr, sol, cost) {
            Ok(e) if e.controller_cost <= eval.controller_cost - cfg.armijo_c * eta * grad_sq => {
                return Ok(Some((next, e, eta)));
            }
            Ok(_) | Err(Error::Unstable { .. }) => eta *= cfg.shrink,
            Err(other) => return Err(other),
        }
    }
    Ok(None)
}
