//! Residual dynamics models `f̂(s, a) ≈ s' - s` with local Lipschitz
//! regularization, Lipschitz estimation and bound-driven model selection.

mod lipschitz;
mod losses;
mod model;
mod select;
mod train;

pub use lipschitz::{estimate_local_lipschitz, product_bounds, LipschitzEstimate, LipschitzReport};
pub use losses::{
    hinge_penalty, l0_surrogate, mse_loss, sigmoid, slack_loss, weighted_loss,
};
pub use model::{DynamicsModel, Normalizer, PenaltyForm, RegConfig, RegMode};
pub use select::{
    hinge_lambda_monotonicity, model_selection_score, default_sweep_grid, select_best,
    MonotonicityBreak, SelectionCriterion,
};
pub use train::{eval_eps, train_dynamics, DynamicsObjective};
