//! Small feed-forward network engine: ReLU MLPs with exact reverse-mode
//! gradients, Adam, spectral-norm projection and JSON checkpoints.

mod checkpoint;
mod mlp;
mod optim;
mod spectral;
mod train;

pub use checkpoint::{load_mlp, save_mlp, Checkpoint};
pub use mlp::{grad_params, Gradients, Layer, Loss, Mlp, MlpCache};
pub use optim::Adam;
pub use spectral::{spectral_norm, spectral_project, PowerIteration};
pub(crate) use spectral::project_in_place;
pub use train::{fit, Objective, TrainConfig, TrainOutcome};
