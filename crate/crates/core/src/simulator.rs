//! Seeded rollouts of the plant under a lifted history-feedback policy, and
//! the exact stationary cost of that policy from an augmented-state model.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::history_repr::LiftedController;
use crate::linalg::{dlyap_cov, psd_sqrt, spectral_radius, Mat};
use crate::lqg_model::{CostWeights, PlantModel};

pub type Vector = DVector<f64>;

/// Input sequence applied for `t < p` while the history fills up.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Warmup {
    #[default]
    Zeros,
    /// One input per warm-up step; must have exactly `p` entries.
    Sequence(Vec<Vector>),
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub p: usize,
    pub seed: u64,
    pub warmup: Warmup,
    pub x0: Option<Vector>,
    /// State norm above which the rollout is declared divergent.
    pub blowup: f64,
}

impl RolloutConfig {
    pub fn new(horizon: usize, p: usize, seed: u64) -> Self {
        Self {
            horizon,
            p,
            seed,
            warmup: Warmup::Zeros,
            x0: None,
            blowup: 1e12,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Window `z_{t,p} = [u_{t−1}; …; u_{t−p}; y_t; …; y_{t−p+1}]` stored flat.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    p: usize,
    nu: usize,
    ny: usize,
    z: Vector,
}

impl HistoryBuffer {
    pub fn new(p: usize, nu: usize, ny: usize) -> Self {
        Self {
            p,
            nu,
            ny,
            z: Vector::zeros(p * (nu + ny)),
        }
    }

    /// Shifts the input block and inserts `u` as the most recent input.
    pub fn push_input(&mut self, u: &Vector) {
        let block = self.p * self.nu;
        let z = self.z.as_mut_slice();
        z.copy_within(0..block - self.nu, self.nu);
        z[..self.nu].copy_from_slice(u.as_slice());
    }

    /// Shifts the output block and inserts `y` as the most recent output.
    pub fn push_output(&mut self, y: &Vector) {
        let start = self.p * self.nu;
        let z = self.z.as_mut_slice();
        z.copy_within(start..z.len() - self.ny, start + self.ny);
        z[start..start + self.ny].copy_from_slice(y.as_slice());
    }

    pub fn z(&self) -> &Vector {
        &self.z
    }
}

/// One time step of a recorded trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub t: usize,
    pub y: Vector,
    pub u: Vector,
    pub stage_cost: f64,
}

/// Plant and cost with noise square roots factored once.
#[derive(Debug, Clone)]
pub struct Simulator {
    plant: PlantModel,
    cost: CostWeights,
    w_sqrt: Mat,
    v_sqrt: Mat,
}

impl Simulator {
    pub fn new(plant: &PlantModel, cost: &CostWeights) -> Result<Self> {
        if cost.q().nrows() != plant.ny() || cost.r().nrows() != plant.nu() {
            return Err(Error::dim("Simulator", "cost weights do not match the plant"));
        }
        Ok(Self {
            w_sqrt: psd_sqrt(plant.w())?,
            v_sqrt: psd_sqrt(plant.v())?,
            plant: plant.clone(),
            cost: cost.clone(),
        })
    }

    pub fn plant(&self) -> &PlantModel {
        &self.plant
    }

    pub fn cost(&self) -> &CostWeights {
        &self.cost
    }

    /// `(1/T) Σ_t (y_tᵀQy_t + u_tᵀRu_t)` over one seeded trajectory.
    pub fn rollout_cost(&self, ktilde: &LiftedController, rcfg: &RolloutConfig) -> Result<f64> {
        self.run(ktilde, 1.0, rcfg, None)
    }

    /// Rollout of `x⁺ = √γ(Ax + Bu) + γ^{(t+1)/2}w_t`, `y = Cx + γ^{t/2}v_t`.
    pub fn rollout_cost_damped(
        &self,
        ktilde: &LiftedController,
        gamma: f64,
        rcfg: &RolloutConfig,
    ) -> Result<f64> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidInput(format!("discount {gamma} outside (0, 1]")));
        }
        self.run(ktilde, gamma, rcfg, None)
    }

    pub fn trajectory(
        &self,
        ktilde: &LiftedController,
        gamma: f64,
        rcfg: &RolloutConfig,
    ) -> Result<Vec<TrajectoryRow>> {
        let mut rows = Vec::with_capacity(rcfg.horizon);
        self.run(ktilde, gamma, rcfg, Some(&mut rows))?;
        Ok(rows)
    }

    /// Mean and standard error of the rollout cost over seeds
    /// `derive_seed(rcfg.seed, &[i])` for `i < n_seeds`.
    pub fn monte_carlo(
        &self,
        ktilde: &LiftedController,
        rcfg: &RolloutConfig,
        n_seeds: usize,
    ) -> Result<(f64, f64)> {
        if n_seeds < 2 {
            return Err(Error::InvalidInput("Monte-Carlo estimate needs at least 2 seeds".into()));
        }
        let costs = (0..n_seeds)
            .into_par_iter()
            .map(|i| self.rollout_cost(ktilde, &rcfg.with_seed(derive_seed(rcfg.seed, &[i as u64]))))
            .collect::<Result<Vec<_>>>()?;
        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok((mean, (var / n).sqrt()))
    }

    fn run(
        &self,
        ktilde: &LiftedController,
        gamma: f64,
        rcfg: &RolloutConfig,
        mut rows: Option<&mut Vec<TrajectoryRow>>,
    ) -> Result<f64> {
        let (nx, nu, ny) = (self.plant.nx(), self.plant.nu(), self.plant.ny());
        let p = rcfg.p;
        if ktilde.p() != p || ktilde.gain().shape() != (nu, p * (nu + ny)) {
            return Err(Error::dim("rollout", "lifted gain does not match plant and p"));
        }
        if rcfg.horizon <= p || p == 0 {
            return Err(Error::InvalidInput(format!(
                "rollout horizon T = {} must exceed p = {p} >= 1",
                rcfg.horizon
            )));
        }
        if let Warmup::Sequence(seq) = &rcfg.warmup {
            if seq.len() != p || seq.iter().any(|u| u.len() != nu) {
                return Err(Error::dim("rollout", format!("warm-up needs {p} inputs of length {nu}")));
            }
        }
        let mut x = match &rcfg.x0 {
            Some(x0) if x0.len() == nx => x0.clone(),
            Some(_) => return Err(Error::dim("rollout", "x0 has the wrong length")),
            None => Vector::zeros(nx),
        };

        let (a, b, c) = (self.plant.a(), self.plant.b(), self.plant.c());
        let (q, r) = (self.cost.q(), self.cost.r());
        let k = ktilde.gain();
        let sqrt_gamma = gamma.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(rcfg.seed);
        let mut hist = HistoryBuffer::new(p, nu, ny);
        let mut y = Vector::zeros(ny);
        let mut u = Vector::zeros(nu);
        let mut e_w = Vector::zeros(nx);
        let mut e_v = Vector::zeros(ny);
        let mut scratch_x = Vector::zeros(nx);
        let mut scratch_y = Vector::zeros(ny);
        let mut scratch_u = Vector::zeros(nu);
        let mut total = 0.0;

        for t in 0..rcfg.horizon {
            fill_normal(&mut e_v, &mut rng);
            y.gemv(1.0, c, &x, 0.0);
            y.gemv(gamma.powf(t as f64 / 2.0), &self.v_sqrt, &e_v, 1.0);
            hist.push_output(&y);

            if t < p {
                match &rcfg.warmup {
                    Warmup::Zeros => u.fill(0.0),
                    Warmup::Sequence(seq) => u.copy_from(&seq[t]),
                }
            } else {
                u.gemv(1.0, k, hist.z(), 0.0);
            }

            scratch_y.gemv(1.0, q, &y, 0.0);
            scratch_u.gemv(1.0, r, &u, 0.0);
            let stage = y.dot(&scratch_y) + u.dot(&scratch_u);
            total += stage;
            if let Some(rows) = rows.as_deref_mut() {
                rows.push(TrajectoryRow {
                    t,
                    y: y.clone(),
                    u: u.clone(),
                    stage_cost: stage,
                });
            }

            fill_normal(&mut e_w, &mut rng);
            scratch_x.gemv(1.0, a, &x, 0.0);
            scratch_x.gemv(1.0, b, &u, 1.0);
            scratch_x *= sqrt_gamma;
            scratch_x.gemv(gamma.powf((t + 1) as f64 / 2.0), &self.w_sqrt, &e_w, 1.0);
            std::mem::swap(&mut x, &mut scratch_x);
            hist.push_input(&u);

            let norm = x.norm();
            if !(norm <= rcfg.blowup) {
                return Err(Error::Divergence { step: t, norm });
            }
        }
        Ok(total / rcfg.horizon as f64)
    }
}

fn fill_normal(v: &mut Vector, rng: &mut ChaCha8Rng) {
    for e in v.iter_mut() {
        *e = StandardNormal.sample(rng);
    }
}

/// SplitMix64 chain over `base` and `parts`, used to key independent streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Linear model of the true closed loop under `u_t = K̃z_{t,p}` with state
/// `ξ = [x_t; u_{t−1}; …; u_{t−p}; y_{t−1}; …; y_{t−p+1}]`.
#[derive(Debug, Clone)]
pub struct LiftedClosedLoop {
    /// `ξ⁺ = Fξ + noise`
    pub f: Mat,
    /// Covariance of the one-step noise on `ξ`.
    pub noise: Mat,
    /// `u_t = Gξ_t + K_{y,0}v_t`
    pub g: Mat,
    pub ky0: Mat,
}

impl LiftedClosedLoop {
    pub fn new(plant: &PlantModel, ktilde: &LiftedController) -> Result<Self> {
        let (nx, nu, ny, p) = (plant.nx(), plant.nu(), plant.ny(), ktilde.p());
        let k = ktilde.gain();
        if k.shape() != (nu, p * (nu + ny)) {
            return Err(Error::dim("LiftedClosedLoop", "lifted gain does not match the plant"));
        }
        let nyr = (p - 1) * ny;
        let n = nx + p * nu + nyr;
        let (iu, iy) = (nx, nx + p * nu);
        let ku = k.columns(0, p * nu);
        let ky0 = k.columns(p * nu, ny).into_owned();
        let kyr = k.columns(p * nu + ny, nyr);

        let mut g = Mat::zeros(nu, n);
        g.columns_mut(0, nx).copy_from(&(&ky0 * plant.c()));
        g.columns_mut(iu, p * nu).copy_from(&ku);
        g.columns_mut(iy, nyr).copy_from(&kyr);

        let mut f = Mat::zeros(n, n);
        let mut top = plant.b() * &g;
        {
            let mut state_part = top.columns_mut(0, nx);
            state_part += plant.a();
        }
        f.rows_mut(0, nx).copy_from(&top);
        f.rows_mut(iu, nu).copy_from(&g);
        for i in 1..p {
            for j in 0..nu {
                f[(iu + i * nu + j, iu + (i - 1) * nu + j)] = 1.0;
            }
        }
        if p > 1 {
            f.view_mut((iy, 0), (ny, nx)).copy_from(plant.c());
            for i in 1..p - 1 {
                for j in 0..ny {
                    f[(iy + i * ny + j, iy + (i - 1) * ny + j)] = 1.0;
                }
            }
        }

        // ξ⁺ noise = M_w w + M_v v
        let mut m_w = Mat::zeros(n, nx);
        m_w.view_mut((0, 0), (nx, nx)).fill_with_identity();
        let mut m_v = Mat::zeros(n, ny);
        m_v.view_mut((0, 0), (nx, ny)).copy_from(&(plant.b() * &ky0));
        m_v.view_mut((iu, 0), (nu, ny)).copy_from(&ky0);
        if p > 1 {
            m_v.view_mut((iy, 0), (ny, ny)).fill_with_identity();
        }
        let noise = &m_w * plant.w() * m_w.transpose() + &m_v * plant.v() * m_v.transpose();
        Ok(Self { f, noise, g, ky0 })
    }

    pub fn radius(&self) -> Result<f64> {
        spectral_radius(&self.f)
    }
}

/// Exact ergodic cost of `u_t = K̃z_{t,p}` on the true plant.
pub fn stationary_lifted_cost(
    plant: &PlantModel,
    cost: &CostWeights,
    ktilde: &LiftedController,
) -> Result<f64> {
    let cl = LiftedClosedLoop::new(plant, ktilde)?;
    let rho = cl.radius()?;
    if rho >= 1.0 {
        return Err(Error::Unstable {
            context: "lifted closed loop",
            rho,
        });
    }
    let x = dlyap_cov(&cl.f, &cl.noise)?;
    let nx = plant.nx();
    let mut h = Mat::zeros(plant.ny(), cl.f.nrows());
    h.columns_mut(0, nx).copy_from(plant.c());
    let (q, r) = (cost.q(), cost.r());
    let output = (h.transpose() * q * &h * &x).trace() + (q * plant.v()).trace();
    let input =
        (cl.g.transpose() * r * &cl.g * &x).trace() + (cl.ky0.transpose() * r * &cl.ky0 * plant.v()).trace();
    Ok(output + input)
}
