//! End-to-end checks on the four-state benchmark plant.

use pglqg::annealing::{run_annealing, AnnealConfig, ModelBasedProblem};
use pglqg::history_repr::closed_loop_radius;
use pglqg::lqg_model::controller_cost;
use pglqg::pg_model_based::{exact_gradient, run_model_based, PgConfig};
use pglqg::simulator::{stationary_lifted_cost, LiftedClosedLoop};
use pglqg::{build_repr, lift, project, solve_lqg, CostWeights, OffsetMode, PlantModel};

fn setup() -> (PlantModel, CostWeights) {
    (PlantModel::benchmark(), CostWeights::identity(2, 2))
}

#[test]
fn open_loop_is_unstable_and_min_phase_data_is_consistent() {
    let (plant, _) = setup();
    let rho = plant.open_loop_radius().unwrap();
    assert!((rho - 1.5).abs() < 1e-5, "rho = {rho}");
    assert_eq!(plant.controllability_rank().unwrap(), 4);
    assert_eq!(plant.observability_rank().unwrap(), 4);
}

#[test]
fn optimal_lifted_gain_has_zero_gradient() {
    let (plant, cost) = setup();
    let sol = solve_lqg(&plant, &cost).unwrap();
    for p in [2, 4, 8] {
        let repr = build_repr(&sol, p).unwrap();
        let kstar = lift(&sol.k_star, &repr).unwrap();
        let g = exact_gradient(&kstar, &repr, &sol, &cost).unwrap();
        assert!(g.norm() < 1e-9, "p = {p}: |grad| = {}", g.norm());
    }
}

#[test]
fn filter_error_offset_matches_the_lifted_loop_at_the_optimum() {
    let (plant, cost) = setup();
    let sol = solve_lqg(&plant, &cost)
        .unwrap()
        .with_offset_mode(OffsetMode::FilterError);
    let repr = build_repr(&sol, 4).unwrap();
    let kstar = lift(&sol.k_star, &repr).unwrap();
    let analytic = controller_cost(&kstar, &repr, &sol, &cost).unwrap() + sol.offset();
    let exact = stationary_lifted_cost(&plant, &cost, &kstar).unwrap();
    assert!((analytic - exact).abs() < 1e-10 * exact, "{analytic} vs {exact}");
}

#[test]
fn annealed_controller_starts_a_monotone_descent() {
    let (plant, cost) = setup();
    let mut problem = ModelBasedProblem::new(
        &plant,
        &cost,
        4,
        PgConfig {
            max_iter: 100,
            ..PgConfig::default()
        },
    );
    let result = run_annealing(&mut problem, &AnnealConfig::default(), plant.open_loop_radius().unwrap()).unwrap();
    let gammas: Vec<f64> = result.trace.iter().map(|r| r.gamma).collect();
    assert_eq!(*gammas.last().unwrap(), 1.0);
    assert!(gammas.windows(2).all(|w| w[1] > w[0]));

    let sol = solve_lqg(&plant, &cost).unwrap();
    let repr = build_repr(&sol, 4).unwrap();
    let k0 = &result.controller;
    assert!(closed_loop_radius(k0, &repr, &plant, 1.0).unwrap() < 1.0);
    // Canonical output: no null-space component left.
    let relifted = lift(&project(k0, &repr).unwrap(), &repr).unwrap();
    assert!((relifted.gain() - k0.gain()).norm() < 1e-9);
    assert!(LiftedClosedLoop::new(&plant, k0).unwrap().radius().unwrap() < 1.0);

    let trace = run_model_based(
        k0,
        &repr,
        &sol,
        &cost,
        &PgConfig {
            max_iter: 500,
            ..PgConfig::default()
        },
    )
    .unwrap();
    assert!(trace.is_monotone());
    assert!(trace.final_gap() < 0.01 * trace.initial_gap());
}
