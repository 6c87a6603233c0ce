//! Every tolerance used by the oracle comparisons and the acceptance suite.
#![allow(dead_code)]

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative error allowed between backward and finite differences.
pub const FD_REL_TOL: f64 = 1e-4;
/// Below this magnitude finite differences are compared absolutely.
pub const FD_ABS_FLOOR: f64 = 1e-8;
/// Gradients smaller than this are re-differenced in double-double, where
/// f64 rounding of the loss (~1e-11 after dividing by 2h) is not negligible.
pub const FD_WIDE_BELOW: f64 = 1e-6;
/// Step for the double-double differences. Small enough that truncation
/// (~h^2/6 times the third derivative) stays under the tolerance.
pub const FD_WIDE_STEP: f64 = 1e-8;
/// Routing weights must sum to one within this.
pub const ROUTE_SUM_TOL: f64 = 1e-9;
/// Oracle recomputations of forward values (losses, features, adapted prompts).
pub const FORWARD_TOL: f64 = 1e-10;
/// Oracle cosine scores versus index scores.
pub const SCORE_TOL: f64 = 1e-12;
/// Training must bring the final-epoch loss to at most this fraction of the first.
pub const LOSS_RATIO_TARGET: f64 = 0.5;
/// Pinned regression numbers from the seeded default training run.
pub const BASELINE_TOL: f64 = 1e-9;
/// Criterion runtime budgets, seconds.
pub const GRADIENT_BUDGET_S: f64 = 60.0;
pub const TRAINING_BUDGET_S: f64 = 300.0;
