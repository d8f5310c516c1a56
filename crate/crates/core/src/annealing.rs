//! Discount annealing: solve damped problems `A_γ = √γA`, `B_γ = √γB` for an
//! increasing sequence of discounts until the lifted controller stabilizes the
//! undamped plant.

use crate::error::{Error, Result};
use crate::history_repr::{
    build_repr, closed_loop_radius, lift, project, HistoryRepr, LiftedController,
};
use crate::lqg_model::{controller_cost, solve_lqg, CostWeights, LqgSolution, PlantModel};
use crate::pg_model_based::{run_model_based, PgConfig};
use crate::simulator::{derive_seed, RolloutConfig, Simulator};
use crate::zeroth_order::{run_model_free, RolloutOracle, ZoConfig, ZoGradient};

/// `min(1, 0.9 / ρ(A)²)`: the largest discount at which `K̃ = 0` is
/// stabilizing with a 10% margin.
pub fn safe_initial_gamma(rho_a: f64) -> f64 {
    if rho_a <= 0.0 {
        return 1.0;
    }
    (0.9 / (rho_a * rho_a)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// `c₁ J_γ ≤ J_{γ₊} ≤ c₂ J_γ`
    Multiplicative,
    /// `J_γ + c₁ ≤ J_{γ₊} ≤ J_γ + c₂`
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceWindow {
    pub c1: f64,
    pub c2: f64,
    pub mode: WindowMode,
}

impl AcceptanceWindow {
    pub fn new(c1: f64, c2: f64, mode: WindowMode) -> Result<Self> {
        if !(c1 > 0.0 && c1 <= c2 && c2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "acceptance window needs 0 < c1 <= c2, got c1 = {c1}, c2 = {c2}"
            )));
        }
        Ok(Self { c1, c2, mode })
    }

    /// `c₁ = 1e-5`, `c₂ = 2.5e-5`, multiplicative.
    pub fn printed() -> Self {
        Self {
            c1: 1e-5,
            c2: 2.5e-5,
            mode: WindowMode::Multiplicative,
        }
    }

    /// `c₁ = 1`, `c₂ = 2`, multiplicative.
    pub fn conventional() -> Self {
        Self {
            c1: 1.0,
            c2: 2.0,
            mode: WindowMode::Multiplicative,
        }
    }

    fn bounds(&self, j_gamma: f64) -> (f64, f64) {
        match self.mode {
            WindowMode::Multiplicative => (self.c1 * j_gamma, self.c2 * j_gamma),
            WindowMode::Absolute => (j_gamma + self.c1, j_gamma + self.c2),
        }
    }

    pub fn accepts(&self, j_gamma: f64, j_plus: f64) -> bool {
        let (lo, hi) = self.bounds(j_gamma);
        lo <= j_plus && j_plus <= hi
    }
}

/// Discounted problem family queried by the annealing loop.
pub trait DiscountedProblem {
    /// `(n_u, n_y, p)` of the lifted controller.
    fn dims(&self) -> (usize, usize, usize);

    /// `J_γ(K̃)`, or `None` when `K̃` does not stabilize the γ-damped system.
    fn cost_at(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<Option<f64>>;

    /// `√γ ρ(A + BK̃S_γ†)` when a model is available for reporting.
    fn radius_at(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<Option<f64>>;

    /// Inner solve at a fixed discount, started from `ktilde`.
    fn improve(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<LiftedController>;

    /// Representative of `ktilde` with no component in the null space of the
    /// representation at `gamma`, when that representation is known.
    fn canonicalize(&mut self, ktilde: &LiftedController, _gamma: f64) -> Result<LiftedController> {
        Ok(ktilde.clone())
    }
}

/// Inner solves by exact gradient descent on each damped plant.
pub struct ModelBasedProblem {
    plant: PlantModel,
    cost: CostWeights,
    p: usize,
    pub inner: PgConfig,
    cache: Vec<(f64, LqgSolution, HistoryRepr)>,
}

impl ModelBasedProblem {
    pub fn new(plant: &PlantModel, cost: &CostWeights, p: usize, inner: PgConfig) -> Self {
        Self {
            plant: plant.clone(),
            cost: cost.clone(),
            p,
            inner,
            cache: Vec::new(),
        }
    }

    /// LQG solution and history representation of the γ-damped plant.
    pub fn damped(&mut self, gamma: f64) -> Result<(&LqgSolution, &HistoryRepr)> {
        let idx = match self.cache.iter().position(|(g, _, _)| *g == gamma) {
            Some(i) => i,
            None => {
                let plant = self.plant.damped(gamma)?;
                let sol = solve_lqg(&plant, &self.cost)?;
                let repr = build_repr(&sol, self.p)?;
                self.cache.push((gamma, sol, repr));
                self.cache.len() - 1
            }
        };
        let (_, sol, repr) = &self.cache[idx];
        Ok((sol, repr))
    }
}

impl DiscountedProblem for ModelBasedProblem {
    fn dims(&self) -> (usize, usize, usize) {
        (self.plant.nu(), self.plant.ny(), self.p)
    }

    fn cost_at(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<Option<f64>> {
        let cost = self.cost.clone();
        let (sol, repr) = self.damped(gamma)?;
        match controller_cost(ktilde, repr, sol, &cost) {
            Ok(j) => Ok(Some(j)),
            Err(Error::Unstable { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn radius_at(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<Option<f64>> {
        let plant = self.plant.clone();
        let (_, repr) = self.damped(gamma)?;
        closed_loop_radius(ktilde, repr, &plant, gamma).map(Some)
    }

    fn improve(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<LiftedController> {
        let cost = self.cost.clone();
        let inner = self.inner.clone();
        let (sol, repr) = self.damped(gamma)?;
        Ok(run_model_based(ktilde, repr, sol, &cost, &inner)?.controller)
    }

    fn canonicalize(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<LiftedController> {
        let (_, repr) = self.damped(gamma)?;
        lift(&project(ktilde, repr)?, repr)
    }
}

/// Inner solves by the zeroth-order loop on damped rollouts; costs are
/// averaged over `n_eval` seeded rollouts.
pub struct ModelFreeProblem {
    sim: Simulator,
    p: usize,
    pub inner: ZoConfig,
    pub n_eval: usize,
    /// Plant used only to report closed-loop radii.
    pub report_model: Option<(PlantModel, CostWeights)>,
    outer_calls: u64,
}

impl ModelFreeProblem {
    pub fn new(sim: Simulator, p: usize, inner: ZoConfig, n_eval: usize) -> Self {
        Self {
            sim,
            p,
            inner,
            n_eval,
            report_model: None,
            outer_calls: 0,
        }
    }
}

impl DiscountedProblem for ModelFreeProblem {
    fn dims(&self) -> (usize, usize, usize) {
        (self.sim.plant().nu(), self.sim.plant().ny(), self.p)
    }

    fn cost_at(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<Option<f64>> {
        let base = RolloutConfig::new(self.inner.horizon, self.p, 0);
        let mut total = 0.0;
        for i in 0..self.n_eval {
            let seed = derive_seed(self.inner.seed, &[u64::MAX, gamma.to_bits(), i as u64]);
            match self.sim.rollout_cost_damped(ktilde, gamma, &base.with_seed(seed)) {
                Ok(j) => total += j,
                Err(Error::Divergence { .. }) => return Ok(None),
                Err(e) => return Err(e),
            }
        }
        Ok(Some(total / self.n_eval as f64))
    }

    fn radius_at(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<Option<f64>> {
        let Some((plant, cost)) = &self.report_model else {
            return Ok(None);
        };
        let damped = plant.damped(gamma)?;
        let sol = solve_lqg(&damped, cost)?;
        let repr = build_repr(&sol, self.p)?;
        closed_loop_radius(ktilde, &repr, plant, gamma).map(Some)
    }

    fn improve(&mut self, ktilde: &LiftedController, gamma: f64) -> Result<LiftedController> {
        let oracle = RolloutOracle {
            sim: self.sim.clone(),
            rollout: RolloutConfig::new(self.inner.horizon, self.p, 0),
            gamma,
        };
        let mut cfg = self.inner.clone();
        cfg.seed = derive_seed(self.inner.seed, &[self.outer_calls]);
        self.outer_calls += 1;
        let eta = cfg.eta;
        let iterations = cfg.iterations;
        let mut source = ZoGradient {
            oracle: &oracle,
            cfg,
        };
        Ok(run_model_free(ktilde, &mut source, eta, iterations, None)?.controller)
    }
}

#[derive(Debug, Clone)]
pub struct AnnealConfig {
    /// Starting discount; derived from the open-loop radius when unset.
    pub gamma0: Option<f64>,
    pub window: AcceptanceWindow,
    pub max_outer: usize,
    /// Bisection steps per discount update.
    pub bisection_steps: usize,
    /// Discounts within this distance of 1 are treated as 1.
    pub gamma_tol: f64,
    /// Return `K S*` for the final projected gain `K` instead of the raw
    /// iterate. Components left over from earlier representations do not
    /// change the analytic cost but do change the true lifted closed loop.
    pub canonical_output: bool,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            gamma0: None,
            window: AcceptanceWindow::conventional(),
            max_outer: 50,
            bisection_steps: 30,
            gamma_tol: 1e-9,
            canonical_output: true,
        }
    }
}

/// Returns `γ₊ ∈ (γ, 1]` at which `ktilde` is still stabilizing and the cost
/// window holds. The terminal value 1 is probed first, then the interval is
/// bisected, preferring the largest accepted discount.
pub fn gamma_search(
    problem: &mut dyn DiscountedProblem,
    ktilde: &LiftedController,
    gamma: f64,
    j_gamma: f64,
    cfg: &AnnealConfig,
) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("discount search needs gamma in (0, 1), got {gamma}")));
    }
    let (lo_bound, hi_bound) = cfg.window.bounds(j_gamma);
    if let Some(j) = problem.cost_at(ktilde, 1.0)? {
        if lo_bound <= j && j <= hi_bound {
            return Ok(1.0);
        }
    }
    let (mut lo, mut hi) = (gamma, 1.0);
    let mut best = None;
    for _ in 0..cfg.bisection_steps {
        let mid = 0.5 * (lo + hi);
        match problem.cost_at(ktilde, mid)? {
            Some(j) if j < lo_bound => lo = mid,
            Some(j) if j <= hi_bound => {
                best = Some(mid);
                lo = mid;
            }
            _ => hi = mid,
        }
    }
    best.filter(|&g| g > gamma).ok_or_else(|| Error::AnnealStall {
        gamma,
        reason: format!(
            "no discount in ({gamma}, 1] satisfies the acceptance window [{lo_bound:e}, {hi_bound:e}]; \
             try different c1/c2"
        ),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AnnealRecord {
    pub outer: usize,
    pub gamma: f64,
    pub rho_closed_loop: Option<f64>,
    pub j_gamma: f64,
}

#[derive(Debug, Clone)]
pub struct AnnealResult {
    pub controller: LiftedController,
    pub trace: Vec<AnnealRecord>,
}

/// Anneals from `K̃ = 0` at `γ₀` up to `γ = 1`. `rho_a` is the known or
/// estimated open-loop spectral radius used when `cfg.gamma0` is unset.
pub fn run_annealing(
    problem: &mut dyn DiscountedProblem,
    cfg: &AnnealConfig,
    rho_a: f64,
) -> Result<AnnealResult> {
    let mut gamma = cfg.gamma0.unwrap_or_else(|| safe_initial_gamma(rho_a));
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidInput(format!("initial discount {gamma} outside (0, 1]")));
    }
    let (nu, ny, p) = problem.dims();
    let mut k = LiftedController::zeros(nu, ny, p);
    if problem.cost_at(&k, gamma)?.is_none() {
        return Err(Error::AnnealStall {
            gamma,
            reason: "the zero controller does not stabilize the initial damped system".into(),
        });
    }
    let mut trace = Vec::new();
    for outer in 0..cfg.max_outer {
        if gamma >= 1.0 - cfg.gamma_tol {
            gamma = 1.0;
        } else {
            k = problem.improve(&k, gamma)?;
        }
        let j_gamma = problem.cost_at(&k, gamma)?.ok_or_else(|| Error::AnnealStall {
            gamma,
            reason: "inner solve returned a controller that is not stabilizing".into(),
        })?;
        trace.push(AnnealRecord {
            outer,
            gamma,
            rho_closed_loop: problem.radius_at(&k, gamma)?,
            j_gamma,
        });
        if gamma == 1.0 {
            if cfg.canonical_output {
                k = problem.canonicalize(&k, 1.0)?;
            }
            return Ok(AnnealResult { controller: k, trace });
        }
        gamma = gamma_search(problem, &k, gamma, j_gamma, cfg)?;
    }
    Err(Error::AnnealBudget {
        outer: cfg.max_outer,
        gamma,
    })
}

/// Open-loop growth rate from the slope of `log ‖y_t‖` over short zero-input
/// bursts, scaled by `safety`.
pub fn estimate_open_loop_radius(
    sim: &Simulator,
    burst: usize,
    n_bursts: usize,
    seed: u64,
    safety: f64,
) -> Result<f64> {
    if burst < 3 || n_bursts == 0 {
        return Err(Error::InvalidInput("need bursts of at least 3 steps".into()));
    }
    let (nu, ny) = (sim.plant().nu(), sim.plant().ny());
    let zero = LiftedController::zeros(nu, ny, 1);
    let mut mean_log = vec![0.0; burst];
    for b in 0..n_bursts {
        let mut rcfg = RolloutConfig::new(burst, 1, derive_seed(seed, &[b as u64]));
        rcfg.blowup = f64::INFINITY;
        let rows = sim.trajectory(&zero, 1.0, &rcfg)?;
        for (t, row) in rows.iter().enumerate() {
            mean_log[t] += row.y.norm().max(f64::MIN_POSITIVE).ln() / n_bursts as f64;
        }
    }
    let n = burst as f64;
    let t_mean = (n - 1.0) / 2.0;
    let l_mean = mean_log.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, l) in mean_log.iter().enumerate() {
        num += (t as f64 - t_mean) * (l - l_mean);
        den += (t as f64 - t_mean).powi(2);
    }
    Ok(safety * (num / den).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    #[test]
    fn safe_gamma_examples() {
        assert!((safe_initial_gamma(1.5) - 0.4).abs() < 1e-15);
        assert_eq!(safe_initial_gamma(0.9), 1.0);
        assert!((safe_initial_gamma(3.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn window_modes() {
        let w = AcceptanceWindow::conventional();
        assert!(w.accepts(1.0, 1.5));
        assert!(!w.accepts(1.0, 2.5));
        assert!(!w.accepts(1.0, 0.5));
        let a = AcceptanceWindow::new(0.1, 0.2, WindowMode::Absolute).unwrap();
        assert!(a.accepts(1.0, 1.15));
        assert!(!a.accepts(1.0, 1.05));
        assert!(AcceptanceWindow::new(2.0, 1.0, WindowMode::Multiplicative).is_err());
    }

    #[test]
    fn stable_plant_is_accepted_at_unit_discount() {
        let s = |v: f64| Mat::from_element(1, 1, v);
        let plant = PlantModel::new(s(0.5), s(1.0), s(1.0), s(0.1), s(0.1)).unwrap();
        let cost = CostWeights::identity(1, 1);
        let mut problem = ModelBasedProblem::new(&plant, &cost, 1, PgConfig::default());
        let out = run_annealing(&mut problem, &AnnealConfig::default(), 0.5).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].gamma, 1.0);
        assert_eq!(out.controller.gain().norm(), 0.0);
    }

    #[test]
    fn search_returns_one_at_optimum() {
        let plant = PlantModel::benchmark();
        let cost = CostWeights::identity(2, 2);
        let mut problem = ModelBasedProblem::new(&plant, &cost, 4, PgConfig::default());
        let (sol, repr) = problem.damped(1.0).unwrap();
        let kstar = crate::history_repr::lift(&sol.k_star, repr).unwrap();
        let j = problem.cost_at(&kstar, 1.0).unwrap().unwrap();
        let g = gamma_search(&mut problem, &kstar, 0.9, j, &AnnealConfig::default()).unwrap();
        assert_eq!(g, 1.0);
    }

    #[test]
    fn scalar_unstable_plant_anneals() {
        let s = |v: f64| Mat::from_element(1, 1, v);
        let plant = PlantModel::new(s(2.0), s(1.0), s(1.0), s(0.1), s(0.1)).unwrap();
        let cost = CostWeights::identity(1, 1);
        let inner = PgConfig {
            max_iter: 100,
            ..PgConfig::default()
        };
        let mut problem = ModelBasedProblem::new(&plant, &cost, 1, inner);
        let out = run_annealing(&mut problem, &AnnealConfig::default(), 2.0).unwrap();
        assert_eq!(out.trace.last().unwrap().gamma, 1.0);
        assert!(out.trace.windows(2).all(|w| w[1].gamma > w[0].gamma));
        assert!(out.trace.iter().all(|r| r.rho_closed_loop.unwrap() < 1.0));
    }

    #[test]
    fn growth_rate_estimate_brackets_true_radius() {
        let plant = PlantModel::benchmark();
        let sim = Simulator::new(&plant, &CostWeights::identity(2, 2)).unwrap();
        let rho = estimate_open_loop_radius(&sim, 20, 16, 7, 1.0).unwrap();
        assert!(rho > 1.2 && rho < 1.8, "estimated {rho}");
    }
}
