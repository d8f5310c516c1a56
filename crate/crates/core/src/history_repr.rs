//! History representation `S*` mapping the stacked input/output window
//! `z_{t,p} = [u_{t−1}; …; u_{t−p}; y_t; …; y_{t−p+1}]` to the current state
//! estimate, and the algebra of lifted controllers `K̃ = K S*`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_finite, left_inverse, pinv_full_row_rank, spectral_norm, spectral_radius, Mat,
};
use crate::lqg_model::{LqgSolution, PlantModel};

/// Block matrices of the history representation for a fixed length `p`.
#[derive(Debug, Clone)]
pub struct HistoryRepr {
    p: usize,
    nx: usize,
    nu: usize,
    ny: usize,
    /// Inputs-to-future-inputs Toeplitz block, `pn_u × pn_u`.
    pub tu: Mat,
    /// Outputs-to-future-inputs Toeplitz block, `pn_u × pn_y`.
    pub ty: Mat,
    /// `[B̃, ÃB̃, …, Ã^{p−1}B̃]`
    pub fu: Mat,
    /// `[L, ÃL, …, Ã^{p−1}L]`
    pub fy: Mat,
    /// `[K*Ã^{p−1}; …; K*Ã; K*]`
    pub ox: Mat,
    /// `S*`, `n_x × p(n_u + n_y)`.
    pub s: Mat,
    /// `S*† = S*ᵀ(S*S*ᵀ)⁻¹`
    pub sdag: Mat,
}

impl HistoryRepr {
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nu(&self) -> usize {
        self.nu
    }
    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Length `p(n_u + n_y)` of the history vector.
    pub fn z_dim(&self) -> usize {
        self.p * (self.nu + self.ny)
    }

    pub fn s_norm(&self) -> Result<f64> {
        spectral_norm(&self.s)
    }
}

/// Smallest history length accepted by [`build_repr`].
///
/// `p ≥ n_y` alone does not make `𝒪_{x,p}` (`pn_u × n_x`) tall enough to
/// have full column rank, so `p ≥ ⌈n_x / n_u⌉` is also required.
pub fn min_history_length(nx: usize, nu: usize, ny: usize) -> usize {
    ny.max(nx.div_ceil(nu)).max(1)
}

pub fn build_repr(sol: &LqgSolution, p: usize) -> Result<HistoryRepr> {
    let (nx, nu, ny) = (sol.nx(), sol.nu(), sol.ny());
    let p_min = min_history_length(nx, nu, ny);
    if p < p_min {
        return Err(Error::Representation(format!(
            "history length p = {p} is too short: need p >= max(n_y, ceil(n_x/n_u)) = {p_min}"
        )));
    }
    let at = &sol.a_tilde;

    // powers[k] = Ã^k for k = 0..=p
    let mut powers = Vec::with_capacity(p + 1);
    powers.push(Mat::identity(nx, nx));
    for k in 1..=p {
        powers.push(at * &powers[k - 1]);
    }

    let mut fu = Mat::zeros(nx, p * nu);
    let mut fy = Mat::zeros(nx, p * ny);
    for (j, power) in powers.iter().take(p).enumerate() {
        fu.columns_mut(j * nu, nu).copy_from(&(power * &sol.b_tilde));
        fy.columns_mut(j * ny, ny).copy_from(&(power * &sol.l));
    }

    let mut ox = Mat::zeros(p * nu, nx);
    for i in 0..p {
        ox.rows_mut(i * nu, nu).copy_from(&(&sol.k_star * &powers[p - 1 - i]));
    }

    let mut tu = Mat::zeros(p * nu, p * nu);
    let mut ty = Mat::zeros(p * nu, p * ny);
    for i in 0..p {
        for j in (i + 1)..p {
            let kp = &sol.k_star * &powers[j - i - 1];
            tu.view_mut((i * nu, j * nu), (nu, nu)).copy_from(&(&kp * &sol.b_tilde));
            ty.view_mut((i * nu, j * ny), (nu, ny)).copy_from(&(&kp * &sol.l));
        }
    }

    let ox_dag = left_inverse(&ox).map_err(|e| match e {
        Error::RankDeficient { sigma_min, .. } => Error::Representation(format!(
            "O_x has no left inverse at p = {p} (smallest singular value {sigma_min:e}); try a larger p"
        )),
        other => other,
    })?;
    let carry = &powers[p] * ox_dag;
    let s_u = &fu + &carry * (Mat::identity(p * nu, p * nu) - &tu);
    let s_y = &fy - &carry * &ty;
    let mut s = Mat::zeros(nx, p * (nu + ny));
    s.columns_mut(0, p * nu).copy_from(&s_u);
    s.columns_mut(p * nu, p * ny).copy_from(&s_y);
    ensure_finite(&s, "S*")?;

    let sdag = pinv_full_row_rank(&s).map_err(|e| match e {
        Error::RankDeficient { sigma_min, .. } => Error::Representation(format!(
            "S* is rank deficient (smallest singular value {sigma_min:e}), which contradicts controllability of (A, B)"
        )),
        other => other,
    })?;

    Ok(HistoryRepr {
        p,
        nx,
        nu,
        ny,
        tu,
        ty,
        fu,
        fy,
        ox,
        s,
        sdag,
    })
}

/// Static gain on the history vector, `u_t = K̃ z_{t,p}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedController {
    gain: Mat,
    p: usize,
}

impl LiftedController {
    /// `gain` must have `p(n_u + n_y)` columns with `n_u = gain.nrows()` and `n_y ≥ 1`.
    pub fn new(gain: Mat, p: usize) -> Result<Self> {
        ensure_finite(&gain, "lifted gain")?;
        let (nu, cols) = gain.shape();
        if p == 0 || nu == 0 || cols % p != 0 || cols / p <= nu {
            return Err(Error::dim(
                "LiftedController",
                format!("{nu}x{cols} gain is not of the form n_u x p(n_u+n_y) for p = {p}"),
            ));
        }
        Ok(Self { gain, p })
    }

    pub fn zeros(nu: usize, ny: usize, p: usize) -> Self {
        Self {
            gain: Mat::zeros(nu, p * (nu + ny)),
            p,
        }
    }

    pub fn gain(&self) -> &Mat {
        &self.gain
    }

    pub fn into_gain(self) -> Mat {
        self.gain
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn nu(&self) -> usize {
        self.gain.nrows()
    }

    pub fn ny(&self) -> usize {
        self.gain.ncols() / self.p - self.nu()
    }

    /// Returns `K̃ + step` after checking shapes and finiteness.
    pub fn offset_by(&self, step: &Mat) -> Result<Self> {
        if step.shape() != self.gain.shape() {
            return Err(Error::dim("LiftedController::offset_by", "step shape differs from gain"));
        }
        let next = &self.gain + step;
        ensure_finite(&next, "lifted gain")?;
        Ok(Self {
            gain: next,
            p: self.p,
        })
    }

    fn check_repr(&self, repr: &HistoryRepr, context: &'static str) -> Result<()> {
        if self.p != repr.p || self.gain.shape() != (repr.nu, repr.z_dim()) {
            return Err(Error::dim(
                context,
                format!(
                    "gain is {}x{} for p = {}, representation expects {}x{} for p = {}",
                    self.gain.nrows(),
                    self.gain.ncols(),
                    self.p,
                    repr.nu,
                    repr.z_dim(),
                    repr.p
                ),
            ));
        }
        Ok(())
    }
}

/// `K̃ = K S*`
pub fn lift(k: &Mat, repr: &HistoryRepr) -> Result<LiftedController> {
    if k.shape() != (repr.nu, repr.nx) {
        return Err(Error::dim(
            "lift",
            format!("gain is {}x{}, expected {}x{}", k.nrows(), k.ncols(), repr.nu, repr.nx),
        ));
    }
    LiftedController::new(k * &repr.s, repr.p)
}

/// `K = K̃ S*†`
pub fn project(ktilde: &LiftedController, repr: &HistoryRepr) -> Result<Mat> {
    ktilde.check_repr(repr, "project")?;
    Ok(&ktilde.gain * &repr.sdag)
}

/// Orthogonal projector `I − S*†S*` onto the null space directions.
pub fn null_space_projector(repr: &HistoryRepr) -> Mat {
    let d = repr.z_dim();
    Mat::identity(d, d) - &repr.sdag * &repr.s
}

/// Dimension of `{γ ∈ ℝ^{1×p(n_u+n_y)} : γS*† = 0}`.
pub fn null_space_dim(repr: &HistoryRepr) -> usize {
    repr.z_dim() - repr.nx
}

/// Draws `Γ` with `ΓS*† = 0` and `‖Γ‖_F = 1` by projecting a Gaussian matrix.
pub fn null_space_sample<R: Rng + ?Sized>(repr: &HistoryRepr, rng: &mut R) -> Result<Mat> {
    if null_space_dim(repr) == 0 {
        return Err(Error::Representation(
            "null space is trivial because p(n_u+n_y) = n_x".into(),
        ));
    }
    let d = repr.z_dim();
    let g = Mat::from_fn(repr.nu, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let gamma = g * null_space_projector(repr);
    let norm = gamma.norm();
    if norm <= f64::EPSILON {
        return Err(Error::Representation("null-space draw collapsed to zero".into()));
    }
    Ok(gamma / norm)
}

/// `√γ · ρ(A + B K̃ S*†)` with `A, B` taken from the undamped `plant`.
pub fn closed_loop_radius(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    plant: &PlantModel,
    gamma: f64,
) -> Result<f64> {
    let k = project(ktilde, repr)?;
    if plant.nx() != repr.nx || plant.nu() != repr.nu {
        return Err(Error::dim("closed_loop_radius", "plant and representation disagree"));
    }
    Ok(gamma.sqrt() * spectral_radius(&(plant.a() + plant.b() * k))?)
}

pub fn is_stabilizing(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    plant: &PlantModel,
    gamma: f64,
) -> bool {
    is_stabilizing_with_margin(ktilde, repr, plant, gamma, 0.0)
}

/// True iff `√γ · ρ(A + B K̃ S*†) < 1 − margin`. Malformed inputs return false.
pub fn is_stabilizing_with_margin(
    ktilde: &LiftedController,
    repr: &HistoryRepr,
    plant: &PlantModel,
    gamma: f64,
    margin: f64,
) -> bool {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return false;
    }
    closed_loop_radius(ktilde, repr, plant, gamma).is_ok_and(|rho| rho < 1.0 - margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqg_model::{solve_lqg, CostWeights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn benchmark(p: usize) -> (PlantModel, LqgSolution, HistoryRepr) {
        let plant = PlantModel::benchmark();
        let sol = solve_lqg(&plant, &CostWeights::identity(2, 2)).unwrap();
        let repr = build_repr(&sol, p).unwrap();
        (plant, sol, repr)
    }

    #[test]
    fn scalar_p1_matches_hand_expansion() {
        let s = |v: f64| Mat::from_element(1, 1, v);
        let plant = PlantModel::new(s(0.9), s(1.0), s(1.0), s(0.5), s(0.2)).unwrap();
        let sol = solve_lqg(&plant, &CostWeights::identity(1, 1)).unwrap();
        let repr = build_repr(&sol, 1).unwrap();
        assert_eq!(repr.tu[(0, 0)], 0.0);
        assert_eq!(repr.ty[(0, 0)], 0.0);
        let (at, bt, l, k) = (
            sol.a_tilde[(0, 0)],
            sol.b_tilde[(0, 0)],
            sol.l[(0, 0)],
            sol.k_star[(0, 0)],
        );
        assert!((repr.s[(0, 0)] - (bt + at / k)).abs() < 1e-12);
        assert!((repr.s[(0, 1)] - l).abs() < 1e-15);
    }

    #[test]
    fn toeplitz_blocks_are_strictly_upper_with_zero_last_row() {
        let (_, _, repr) = benchmark(4);
        let (nu, ny) = (2, 2);
        for i in 0..4 {
            for j in 0..=i {
                assert_eq!(repr.tu.view((i * nu, j * nu), (nu, nu)).norm(), 0.0);
                assert_eq!(repr.ty.view((i * nu, j * ny), (nu, ny)).norm(), 0.0);
            }
        }
        assert_eq!(repr.tu.rows(3 * nu, nu).norm(), 0.0);
        assert_eq!(repr.ty.rows(3 * nu, nu).norm(), 0.0);
    }

    #[test]
    fn pseudoinverse_and_projector_identities() {
        let (_, _, repr) = benchmark(4);
        assert!((&repr.s * &repr.sdag - Mat::identity(4, 4)).norm() < 1e-8);
        let proj = &repr.sdag * &repr.s;
        assert!((&proj * &proj - &proj).norm() < 1e-8);
        assert!((&proj - proj.transpose()).norm() < 1e-8);
    }

    #[test]
    fn short_history_is_rejected() {
        let plant = PlantModel::benchmark();
        let sol = solve_lqg(&plant, &CostWeights::identity(2, 2)).unwrap();
        assert_eq!(min_history_length(4, 2, 2), 2);
        assert!(matches!(build_repr(&sol, 1), Err(Error::Representation(_))));
    }

    #[test]
    fn lift_project_round_trip() {
        let (_, sol, repr) = benchmark(4);
        let kt = lift(&sol.k_star, &repr).unwrap();
        assert_eq!(kt.nu(), 2);
        assert_eq!(kt.ny(), 2);
        assert!((project(&kt, &repr).unwrap() - &sol.k_star).norm() < 1e-8);
        let zero = lift(&Mat::zeros(2, 4), &repr).unwrap();
        assert_eq!(zero.gain().norm(), 0.0);
        assert!(lift(&Mat::zeros(2, 3), &repr).is_err());
    }

    #[test]
    fn project_lift_is_identity_only_on_row_space() {
        let (_, _, repr) = benchmark(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Mat::from_fn(2, 16, |_, _| rng.sample::<f64, _>(StandardNormal));
        let kt = LiftedController::new(g.clone(), 4).unwrap();
        let round = lift(&project(&kt, &repr).unwrap(), &repr).unwrap();
        let expected = &g * &repr.sdag * &repr.s;
        assert!((round.gain() - &expected).norm() < 1e-8);
        assert!((round.gain() - &g).norm() > 1e-3);
    }

    #[test]
    fn null_space_samples() {
        let (_, sol, repr) = benchmark(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g1 = null_space_sample(&repr, &mut rng).unwrap();
        let g2 = null_space_sample(&repr, &mut rng).unwrap();
        assert!((g1.norm() - 1.0).abs() < 1e-12);
        assert!((&g1 * &repr.sdag).norm() < 1e-8);
        assert!((&g1 - &g2).norm() > 1e-3);
        assert_eq!(null_space_dim(&repr), 12);
        assert_eq!(crate::linalg::rank(&repr.sdag.transpose(), 1e-10).unwrap(), 4);

        let kstar = lift(&sol.k_star, &repr).unwrap();
        let shifted = kstar.offset_by(&g1).unwrap();
        let diff = project(&shifted, &repr).unwrap() - project(&kstar, &repr).unwrap();
        assert!(diff.norm() < 1e-8);
    }

    #[test]
    fn stabilizing_set_membership() {
        let (plant, sol, repr) = benchmark(4);
        let kstar = lift(&sol.k_star, &repr).unwrap();
        let zero = LiftedController::zeros(2, 2, 4);
        assert!(is_stabilizing(&kstar, &repr, &plant, 1.0));
        assert!(!is_stabilizing(&zero, &repr, &plant, 1.0));
        assert!(is_stabilizing(&zero, &repr, &plant, 0.4));
        assert!(!is_stabilizing_with_margin(&zero, &repr, &plant, 0.4, 0.1));
        let wrong_p = LiftedController::zeros(2, 2, 3);
        assert!(!is_stabilizing(&wrong_p, &repr, &plant, 1.0));
    }
}
