//! Policy-gradient synthesis of output-feedback LQG controllers through an
//! input/output history representation.
//!
//! The lifted controller `K̃` acts on the last `p` inputs and outputs. Its
//! cost and gradient are evaluated either analytically from a known model or
//! by a one-point zeroth-order estimator over seeded rollouts. Discount
//! annealing produces an initial stabilizing `K̃` for open-loop unstable plants.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annealing;
pub mod error;
pub mod history_repr;
pub mod linalg;
pub mod lqg_model;
pub mod pg_model_based;
pub mod simulator;
pub mod zeroth_order;

pub use error::{Error, Result};
pub use history_repr::{build_repr, lift, project, HistoryRepr, LiftedController};
pub use linalg::Mat;
pub use lqg_model::{solve_lqg, CostWeights, LqgSolution, OffsetMode, PlantModel};
