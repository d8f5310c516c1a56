use pglqg::history_repr::{null_space_projector, null_space_sample};
use pglqg::linalg::{dare, dare_residual, dlyap, dlyap_cov, riccati_gain, spectral_radius};
use pglqg::lqg_model::controller_cost;
use pglqg::zeroth_order::sample_sphere;
use pglqg::{build_repr, lift, project, solve_lqg, CostWeights, LiftedController, Mat, PlantModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0..1.0f64, rows * cols)
        .prop_map(move |v| Mat::from_row_slice(rows, cols, &v))
}

/// Schur-stable `A` with radius in `[0.05, 0.95]`.
fn stable(n: usize) -> impl Strategy<Value = Mat> {
    (matrix(n, n), 0.05..0.95f64).prop_map(|(a, target)| {
        let rho = spectral_radius(&a).unwrap();
        if rho < 1e-8 {
            a * target
        } else {
            a * (target / rho)
        }
    })
}

/// `GGᵀ + εI`.
fn pd(n: usize, eps: f64) -> impl Strategy<Value = Mat> {
    matrix(n, n).prop_map(move |g| &g * g.transpose() + Mat::identity(n, n) * eps)
}

fn lyap_case() -> impl Strategy<Value = (Mat, Mat)> {
    (1usize..=6).prop_flat_map(|n| (stable(n), pd(n, 0.1)))
}

fn dare_case() -> impl Strategy<Value = (Mat, Mat, Mat, Mat)> {
    (1usize..=6, 1usize..=3).prop_flat_map(|(n, m)| {
        (
            matrix(n, n).prop_map(|a| a * 1.5),
            matrix(n, m),
            pd(n, 0.1),
            pd(m, 0.1),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_residual_is_small((a, q) in lyap_case()) {
        let x = dlyap(&a, &q).unwrap();
        let res = (&x - &q - a.transpose() * &x * &a).norm();
        prop_assert!(res <= 1e-10 * x.norm(), "residual {res}");
        let y = dlyap_cov(&a, &q).unwrap();
        let res = (&y - &q - &a * &y * a.transpose()).norm();
        prop_assert!(res <= 1e-10 * y.norm(), "residual {res}");
    }

    #[test]
    fn riccati_solution_is_stabilizing((a, b, q, r) in dare_case()) {
        // A random B can leave a nearly uncontrollable unstable mode; those
        // instances are skipped rather than asserted on.
        if let Ok(p) = dare(&a, &b, &q, &r) {
            prop_assert!(dare_residual(&a, &b, &q, &r, &p) <= 1e-9 * p.norm());
            let k = riccati_gain(&a, &b, &r, &p).unwrap();
            prop_assert!(spectral_radius(&(&a + &b * k)).unwrap() < 1.0);
            prop_assert!((&p - p.transpose()).norm() <= 1e-10 * p.norm());
        }
    }

    #[test]
    fn sphere_samples_have_radius_r(rows in 1usize..4, cols in 1usize..12, r in 1e-3..10.0f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = sample_sphere(rows, cols, r, &mut rng);
        prop_assert!((u.norm() - r).abs() <= 1e-12 * r);
    }
}

fn benchmark() -> (PlantModel, CostWeights) {
    (PlantModel::benchmark(), CostWeights::identity(2, 2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projection_inverts_lifting(p in 2usize..=6, entries in prop::collection::vec(-1.0..1.0f64, 8)) {
        let (plant, cost) = benchmark();
        let sol = solve_lqg(&plant, &cost).unwrap();
        let repr = build_repr(&sol, p).unwrap();
        let k = Mat::from_row_slice(2, 4, &entries);
        let back = project(&lift(&k, &repr).unwrap(), &repr).unwrap();
        prop_assert!((back - &k).norm() <= 1e-9 * (1.0 + k.norm()));
    }

    #[test]
    fn null_space_directions_leave_cost_unchanged(p in 2usize..=6, seed: u64, scale in 0.1..10.0f64) {
        let (plant, cost) = benchmark();
        let sol = solve_lqg(&plant, &cost).unwrap();
        let repr = build_repr(&sol, p).unwrap();
        let proj = null_space_projector(&repr);
        prop_assert!((&proj * &proj - &proj).norm() <= 1e-8);
        prop_assert!((&proj * &repr.sdag).norm() <= 1e-8);

        let kstar = lift(&sol.k_star, &repr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = null_space_sample(&repr, &mut rng).unwrap() * scale;
        let moved = LiftedController::new(kstar.gain() + n, p).unwrap();
        let j0 = controller_cost(&kstar, &repr, &sol, &cost).unwrap();
        let j1 = controller_cost(&moved, &repr, &sol, &cost).unwrap();
        prop_assert!((j1 - j0).abs() <= 1e-9 * j0);
    }
}
