//! Plant, cost weights and the classical LQG solution (steady-state Kalman
//! filter plus optimal estimate-feedback gain), together with the analytic
//! cost of a lifted history-feedback controller.
//!
//! Sign convention: the control law is `u_t = K x̂_t` with
//! `K* = −(R + BᵀPB)⁻¹BᵀPA`. The first-order residual that vanishes at the
//! optimum is therefore `E_K = (R + BᵀP_K B)K + BᵀP_K A`.

use crate::error::{Error, Result};
use crate::history_repr::{project, HistoryRepr, LiftedController};
use crate::linalg::{
    dare, ensure_finite, is_symmetric_psd, mat_from_rows, min_singular_value, rank,
    riccati_gain, smith_doubling, spectral_norm, spectral_radius, Mat,
};

const SYM_TOL: f64 = 1e-10;

/// Linear plant `x⁺ = Ax + Bu + w`, `y = Cx + v` with `w ~ N(0, W)`, `v ~ N(0, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    a: Mat,
    b: Mat,
    c: Mat,
    w: Mat,
    v: Mat,
}

impl PlantModel {
    /// Validates dimensions, noise covariances and controllability/observability.
    pub fn new(a: Mat, b: Mat, c: Mat, w: Mat, v: Mat) -> Result<Self> {
        let plant = Self::new_unchecked_rank(a, b, c, w, v)?;
        let nx = plant.nx();
        let ctrb = plant.controllability_rank()?;
        if ctrb < nx {
            return Err(Error::InvalidInput(format!(
                "(A, B) is not controllable: controllability matrix has rank {ctrb} < {nx}"
            )));
        }
        let obsv = plant.observability_rank()?;
        if obsv < nx {
            return Err(Error::InvalidInput(format!(
                "(A, C) is not observable: observability matrix has rank {obsv} < {nx}"
            )));
        }
        Ok(plant)
    }

    /// Same checks as [`PlantModel::new`] except controllability and observability.
    pub fn new_unchecked_rank(a: Mat, b: Mat, c: Mat, w: Mat, v: Mat) -> Result<Self> {
        let nx = a.nrows();
        if !a.is_square() || nx == 0 {
            return Err(Error::dim("PlantModel", "A must be square and non-empty"));
        }
        if b.nrows() != nx || b.ncols() == 0 {
            return Err(Error::dim("PlantModel", format!("B must have {nx} rows")));
        }
        if c.ncols() != nx || c.nrows() == 0 {
            return Err(Error::dim("PlantModel", format!("C must have {nx} columns")));
        }
        if w.shape() != (nx, nx) {
            return Err(Error::dim("PlantModel", format!("W must be {nx}x{nx}")));
        }
        let ny = c.nrows();
        if v.shape() != (ny, ny) {
            return Err(Error::dim("PlantModel", format!("V must be {ny}x{ny}")));
        }
        for (m, name) in [(&a, "A"), (&b, "B"), (&c, "C"), (&w, "W"), (&v, "V")] {
            ensure_finite(m, name)?;
        }
        if !is_symmetric_psd(&w, SYM_TOL, false) {
            return Err(Error::InvalidInput("W must be symmetric positive semidefinite".into()));
        }
        if !is_symmetric_psd(&v, SYM_TOL, true) {
            return Err(Error::InvalidInput("V must be symmetric positive definite".into()));
        }
        Ok(Self { a, b, c, w, v })
    }

    /// The four-state open-loop unstable benchmark system (two inputs, two
    /// outputs, `W = 0.01 I₄`, `V = 0.01 I₂`).
    pub fn benchmark() -> Self {
        let a = mat_from_rows(&[
            vec![-0.2639, 0.5924, -0.6445, -0.8047],
            vec![0.5288, 0.4654, 0.6087, 0.0537],
            vec![-0.2803, -0.4883, 0.1135, -0.6962],
            vec![-1.0480, 0.2543, -0.1278, -0.1279],
        ])
        .expect("literal");
        let bt = mat_from_rows(&[
            vec![-0.9313, 2.0774, -1.4758, -0.2621],
            vec![-1.0678, 0.3084, -0.7451, -1.5536],
        ])
        .expect("literal");
        let c = mat_from_rows(&[
            vec![2.2795, -0.6637, -1.1390, -0.8495],
            vec![0.4608, 1.2424, 1.4244, -1.3973],
        ])
        .expect("literal");
        Self::new(
            a,
            bt.transpose(),
            c,
            Mat::identity(4, 4) * 0.01,
            Mat::identity(2, 2) * 0.01,
        )
        .expect("benchmark plant is valid")
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn c(&self) -> &Mat {
        &self.c
    }
    pub fn w(&self) -> &Mat {
        &self.w
    }
    pub fn v(&self) -> &Mat {
        &self.v
    }
    pub fn nx(&self) -> usize {
        self.a.nrows()
    }
    pub fn nu(&self) -> usize {
        self.b.ncols()
    }
    pub fn ny(&self) -> usize {
        self.c.nrows()
    }

    pub fn controllability_rank(&self) -> Result<usize> {
        let n = self.nx();
        let mut blocks = Mat::zeros(n, n * self.nu());
        let mut power = self.b.clone();
        for k in 0..n {
            blocks.columns_mut(k * self.nu(), self.nu()).copy_from(&power);
            power = &self.a * power;
        }
        rank(&blocks, 1e-10)
    }

    pub fn observability_rank(&self) -> Result<usize> {
        let n = self.nx();
        let mut blocks = Mat::zeros(n * self.ny(), n);
        let mut power = self.c.clone();
        for k in 0..n {
            blocks.rows_mut(k * self.ny(), self.ny()).copy_from(&power);
            power *= &self.a;
        }
        rank(&blocks, 1e-10)
    }

    pub fn open_loop_radius(&self) -> Result<f64> {
        spectral_radius(&self.a)
    }

    /// Plant with `A_γ = √γ A`, `B_γ = √γ B` and unchanged `C, W, V`.
    pub fn damped(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidInput(format!("discount {gamma} outside (0, 1]")));
        }
        let s = gamma.sqrt();
        Ok(Self {
            a: &self.a * s,
            b: &self.b * s,
            c: self.c.clone(),
            w: self.w.clone(),
            v: self.v.clone(),
        })
    }
}

/// Output and input penalties `(Q, R)` with `Q ⪰ 0` (n_y × n_y) and `R ≻ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: Mat,
    r: Mat,
}

impl CostWeights {
    pub fn new(q: Mat, r: Mat) -> Result<Self> {
        ensure_finite(&q, "Q")?;
        ensure_finite(&r, "R")?;
        if !is_symmetric_psd(&q, SYM_TOL, false) {
            return Err(Error::InvalidInput("Q must be symmetric positive semidefinite".into()));
        }
        if !is_symmetric_psd(&r, SYM_TOL, true) {
            return Err(Error::InvalidInput("R must be symmetric positive definite".into()));
        }
        Ok(Self { q, r })
    }

    pub fn identity(ny: usize, nu: usize) -> Self {
        Self {
            q: Mat::identity(ny, ny),
            r: Mat::identity(nu, nu),
        }
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }
    pub fn r(&self) -> &Mat {
        &self.r
    }

    fn check_against(&self, plant: &PlantModel) -> Result<()> {
        if self.q.shape() != (plant.ny(), plant.ny()) {
            return Err(Error::dim(
                "CostWeights",
                format!("Q must be {0}x{0} (output weight)", plant.ny()),
            ));
        }
        if self.r.shape() != (plant.nu(), plant.nu()) {
            return Err(Error::dim("CostWeights", format!("R must be {0}x{0}", plant.nu())));
        }
        Ok(())
    }
}

/// How the controller-independent part of the analytic cost is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffsetMode {
    /// `Tr(Q̃(I − LC)) + Tr(QV)`.
    AsPrinted,
    /// `Tr(Q̃(I − LC)Σ̃) + Tr(QV)`: the filtered estimation-error contribution,
    /// which is what a stationary rollout actually accumulates.
    FilterError,
    /// A fixed value, typically a Monte-Carlo estimate at the optimum.
    Calibrated(f64),
}

/// Steady-state Kalman filter and optimal estimate-feedback gain.
#[derive(Debug, Clone)]
pub struct LqgSolution {
    a: Mat,
    b: Mat,
    /// Kalman gain `L = Σ̃Cᵀ(CΣ̃Cᵀ + V)⁻¹`.
    pub l: Mat,
    /// Predicted-state error covariance `Σ̃ = dare(Aᵀ, Cᵀ, W, V)`.
    pub sigma_tilde: Mat,
    /// Innovation-driven covariance `Σ_ν = L(CΣ̃Cᵀ + V)Lᵀ`.
    pub sigma_nu: Mat,
    /// Optimal gain `K*` acting on the state estimate.
    pub k_star: Mat,
    /// Control Riccati solution `P = dare(A, B, CᵀQC, R)`.
    pub p: Mat,
    /// `(I − LC)A`
    pub a_tilde: Mat,
    /// `(I − LC)B`
    pub b_tilde: Mat,
    /// `CᵀQC`
    pub q_tilde: Mat,
    /// Stationary estimate covariance under `K*`, `Σ = (A + BK*)Σ(A + BK*)ᵀ + Σ_ν`.
    pub sigma_star: Mat,
    offset_mode: OffsetMode,
    offset: f64,
    offsets: [f64; 2],
}

impl LqgSolution {
    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn nx(&self) -> usize {
        self.a.nrows()
    }
    pub fn nu(&self) -> usize {
        self.b.ncols()
    }
    pub fn ny(&self) -> usize {
        self.l.ncols()
    }

    pub fn offset_mode(&self) -> OffsetMode {
        self.offset_mode
    }

    /// Controller-independent cost offset under the current [`OffsetMode`].
    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn set_offset_mode(&mut self, mode: OffsetMode) {
        self.offset_mode = mode;
        self.offset = match mode {
            OffsetMode::AsPrinted => self.offsets[0],
            OffsetMode::FilterError => self.offsets[1],
            OffsetMode::Calibrated(c) => c,
        };
    }

    pub fn with_offset_mode(mut self, mode: OffsetMode) -> Self {
        self.set_offset_mode(mode);
        self
    }

    /// Optimal value `Tr(PΣ_ν)` of the controller-dependent cost.
    pub fn optimal_controller_cost(&self) -> f64 {
        (&self.p * &self.sigma_nu).trace()
    }

    /// Optimal analytic cost including the offset.
    pub fn optimal_cost(&self) -> f64 {
        self.optimal_controller_cost() + self.offset
    }
}

pub fn solve_lqg(plant: &PlantModel, cost: &CostWeights) -> Result<LqgSolution> {
    cost.check_against(plant)?;
    let (a, b, c) = (plant.a(), plant.b(), plant.c());
    let nx = plant.nx();
    let q_tilde = c.transpose() * cost.q() * c;

    let p = dare(a, b, &q_tilde, cost.r())?;
    let k_star = riccati_gain(a, b, cost.r(), &p)?;

    let sigma_tilde = dare(&a.transpose(), &c.transpose(), plant.w(), plant.v()).map_err(|e| {
        match e {
            Error::InvalidInput(msg) => Error::InvalidInput(format!(
                "estimator Riccati equation failed (is (A, W) stabilizable?): {msg}"
            )),
            other => other,
        }
    })?;
    let innovation = c * &sigma_tilde * c.transpose() + plant.v();
    let l = innovation
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&(c * &sigma_tilde)).transpose())
        .ok_or_else(|| Error::InvalidInput("innovation covariance is not positive definite".into()))?;
    let sigma_nu = crate::linalg::symmetrize(&(&l * &innovation * l.transpose()));
    let i_lc = Mat::identity(nx, nx) - &l * c;
    let a_tilde = &i_lc * a;
    let b_tilde = &i_lc * b;

    let a_cl = a + b * &k_star;
    let rho_cl = spectral_radius(&a_cl)?;
    let rho_est = spectral_radius(&a_tilde)?;
    if rho_cl >= 1.0 || rho_est >= 1.0 {
        return Err(Error::InvalidInput(format!(
            "LQG solution not stabilizing: rho(A+BK*) = {rho_cl}, rho((I-LC)A) = {rho_est}"
        )));
    }
    let sigma_star = smith_doubling(&a_cl.transpose(), &sigma_nu)?;

    let noise_term = (cost.q() * plant.v()).trace();
    let as_printed = (&q_tilde * &i_lc).trace() + noise_term;
    let filter_error = (&q_tilde * &i_lc * &sigma_tilde).trace() + noise_term;

    Ok(LqgSolution {
        a: a.clone(),
        b: b.clone(),
        l,
        sigma_tilde,
        sigma_nu,
        k_star,
        p,
        a_tilde,
        b_tilde,
        q_tilde,
        sigma_star,
        offset_mode: OffsetMode::AsPrinted,
        offset: as_printed,
        offsets: [as_printed, filter_error],
    })
}

/// Closed-loop quantities of the estimate-feedback gain `K = K̃S*†`.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub gain: Mat,
    pub a_cl: Mat,
    pub rho: f64,
    /// `P_K = Q̃ + KᵀRK + A_clᵀ P_K A_cl`
    pub value: Mat,
}

impl ClosedLoop {
    /// `Tr(P_K Σ_ν)`, the controller-dependent part of the cost.
    pub fn controller_cost(&self, sol: &LqgSolution) -> f64 {
        (&self.value * &sol.sigma_nu).trace()
    }

    /// `E_K = (R + BᵀP_K B)K + BᵀP_K A`.
    pub fn first_order_residual(&self, sol: &LqgSolution, cost: &CostWeights) -> Mat {
        let bt_p = sol.b().transpose() * &self.value;
        (cost.r() + &bt_p * sol.b()) * &self.gain + bt_p * sol.a()
    }
}

/// Evaluates the closed loop of a classical gain `K` (n_u × n_x).
pub fn closed_loop_of_gain(k: &Mat, sol: &LqgSolution, cost: &CostWeights) -> Result<ClosedLoop> {
    if k.shape() != (sol.nu(), sol.nx()) {
        return Err(Error::dim(
            "closed_loop_of_gain",
            format!("gain is {}x{}, expected {}x{}", k.nrows(), k.ncols(), sol.nu(), sol.nx()),
        ));
    }
    let a_cl = sol.a() + sol.b() * k;
    let rho = spectral_radius(&a_cl)?;
    if rho >= 1.0 {
        return Err(Error::Unstable {
            context: "closed loop A + BK̃S*†",
            rho,
        });
    }
    let forcing = &sol.q_tilde + k.transpose() * cost.r() * k;
    let value = smith_doubling(&a_cl, &forcing)?;
    Ok(ClosedLoop {
        gain: k.clone(),
        a_cl,
        rho,
        value,
    })
}

pub fn closed_loop(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
) -> Result<ClosedLoop> {
    closed_loop_of_gain(&project(ktilde, repr)?, sol, cost)
}

/// `Tr(P_K̃ Σ_ν) + c₀` with `c₀` from the solution's [`OffsetMode`].
pub fn analytic_cost(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
) -> Result<f64> {
    Ok(controller_cost(ktilde, repr, sol, cost)? + sol.offset())
}

/// Controller-dependent part `Tr(P_K̃ Σ_ν)` of the analytic cost.
pub fn controller_cost(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
) -> Result<f64> {
    Ok(closed_loop(ktilde, repr, sol, cost)?.controller_cost(sol))
}

/// Upper bound `‖Σ_K̃*‖ / σ̲(R) · Tr(E_K̃ᵀE_K̃)` on `J(K̃) − J(K̃*)`.
pub fn advantage_gap_bound(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    sol: &LqgSolution,
    cost: &CostWeights,
) -> Result<f64> {
    let cl = closed_loop(ktilde, repr, sol, cost)?;
    let e = cl.first_order_residual(sol, cost);
    let sigma_star_norm = spectral_norm(&sol.sigma_star)?;
    let r_min = min_singular_value(cost.r())?;
    Ok(sigma_star_norm / r_min * (e.transpose() * &e).trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history_repr::{build_repr, lift};

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn scalar_noise_free_process_gives_zero_kalman_gain() {
        let plant =
            PlantModel::new(scalar(0.5), scalar(1.0), scalar(1.0), scalar(0.0), scalar(1.0)).unwrap();
        let sol = solve_lqg(&plant, &CostWeights::identity(1, 1)).unwrap();
        assert_eq!(sol.sigma_tilde[(0, 0)], 0.0);
        assert_eq!(sol.l[(0, 0)], 0.0);
    }

    #[test]
    fn zero_dynamics_gives_zero_gain() {
        let plant = PlantModel::new_unchecked_rank(
            Mat::zeros(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2) * 0.1,
            Mat::identity(2, 2) * 0.1,
        )
        .unwrap();
        let sol = solve_lqg(&plant, &CostWeights::identity(2, 2)).unwrap();
        assert_eq!(sol.k_star.norm(), 0.0);
    }

    #[test]
    fn benchmark_solution_is_stabilizing() {
        let plant = PlantModel::benchmark();
        let sol = solve_lqg(&plant, &CostWeights::identity(2, 2)).unwrap();
        let rho = spectral_radius(&(plant.a() + plant.b() * &sol.k_star)).unwrap();
        assert!(rho < 1.0);
        assert!(spectral_radius(&sol.a_tilde).unwrap() < 1.0);
        assert!(is_symmetric_psd(&sol.sigma_nu, 1e-10, false));
    }

    #[test]
    fn first_order_residual_vanishes_at_optimum() {
        let plant = PlantModel::benchmark();
        let cost = CostWeights::identity(2, 2);
        let sol = solve_lqg(&plant, &cost).unwrap();
        let cl = closed_loop_of_gain(&sol.k_star, &sol, &cost).unwrap();
        assert!(cl.first_order_residual(&sol, &cost).norm() < 1e-8);
    }

    #[test]
    fn plant_validation_errors() {
        let zero_b = PlantModel::new(
            Mat::identity(2, 2),
            Mat::zeros(2, 1),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
        );
        assert!(matches!(zero_b, Err(Error::InvalidInput(msg)) if msg.contains("controllable")));
        let bad_v = PlantModel::new(scalar(0.5), scalar(1.0), scalar(1.0), scalar(0.0), scalar(0.0));
        assert!(matches!(bad_v, Err(Error::InvalidInput(_))));
        let bad_dims = CostWeights::identity(4, 2);
        let plant = PlantModel::benchmark();
        assert!(matches!(solve_lqg(&plant, &bad_dims), Err(Error::Dimension { .. })));
    }

    #[test]
    fn offset_modes() {
        let plant = PlantModel::benchmark();
        let cost = CostWeights::identity(2, 2);
        let mut sol = solve_lqg(&plant, &cost).unwrap();
        assert_eq!(sol.offset_mode(), OffsetMode::AsPrinted);
        let printed = sol.offset();
        sol.set_offset_mode(OffsetMode::FilterError);
        assert!(sol.offset() < printed);
        sol.set_offset_mode(OffsetMode::Calibrated(0.25));
        assert_eq!(sol.offset(), 0.25);
    }

    #[test]
    fn gap_bound_zero_at_optimum_and_scales_with_r() {
        let plant = PlantModel::benchmark();
        let cost = CostWeights::identity(2, 2);
        let sol = solve_lqg(&plant, &cost).unwrap();
        let repr = build_repr(&sol, 4).unwrap();
        let kstar = lift(&sol.k_star, &repr).unwrap();
        assert!(advantage_gap_bound(&kstar, &repr, &sol, &cost).unwrap() < 1e-14);

        // Holding E fixed, doubling R's smallest singular value halves the prefactor.
        let perturbed = LiftedController::new(kstar.gain() + Mat::from_element(2, 16, 0.01), 4).unwrap();
        let cl = closed_loop(&perturbed, &repr, &sol, &cost).unwrap();
        let e = cl.first_order_residual(&sol, &cost);
        let tr = (e.transpose() * &e).trace();
        let bound = advantage_gap_bound(&perturbed, &repr, &sol, &cost).unwrap();
        let sigma_norm = spectral_norm(&sol.sigma_star).unwrap();
        assert!((bound - sigma_norm * tr).abs() < 1e-12 * bound);
        let scaled = CostWeights::new(cost.q().clone(), cost.r() * 2.0).unwrap();
        let r_min = min_singular_value(scaled.r()).unwrap();
        assert!((sigma_norm / r_min * tr - bound / 2.0).abs() < 1e-12 * bound);
    }
}
