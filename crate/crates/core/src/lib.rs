//! Corrective labels for imitation learning.
//!
//! The pipeline learns a residual dynamics model with a local Lipschitz
//! constraint from expert demonstrations, synthesizes state-action labels
//! near the demonstrations by root finding through that model, filters them
//! by rejection sampling, and trains a behavior-cloning policy on the
//! augmented data. An analytic pendulum supplies ground-truth dynamics for
//! checking the per-label error bounds.

pub mod data;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod labels;
pub mod nn;
pub mod pendulum;
pub mod policy;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
