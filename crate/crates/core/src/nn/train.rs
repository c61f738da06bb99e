//! Minibatch training loop shared by the dynamics model and the policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::{Adam, Gradients, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            epochs: 500,
            seed: 0,
            patience: 50,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "train config needs lr > 0, batch_size > 0, epochs > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A training problem over `len()` indexed samples.
pub trait Objective {
    fn len(&self) -> usize;

    /// Mean loss over the batch and its parameter gradients.
    fn batch_grad(&mut self, net: &Mlp, idx: &[usize]) -> Result<(f64, Gradients)>;

    /// Hook run after every optimizer step (projections, auxiliary
    /// variable updates).
    fn after_step(&mut self, _net: &mut Mlp, _lr: f64) -> Result<()> {
        Ok(())
    }

    /// Validation loss for early stopping; `None` disables it.
    fn val_loss(&mut self, _net: &Mlp) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Mlp,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

/// Adam minibatch training. Batches come from a per-epoch shuffle drawn
/// from the `train/shuffle` stream of `cfg.seed`. With a validation loss,
/// the best-validation parameters are returned.
pub fn fit<O: Objective + ?Sized>(mut net: Mlp, obj: &mut O, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = obj.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = RngStream::new(cfg.seed, "train/shuffle");
    let mut adam = Adam::new(cfg.beta1, cfg.beta2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Mlp, usize)> = None;
    let mut train_hist = Vec::new();
    let mut val_hist = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = obj.batch_grad(&net, chunk)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("batch loss {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            adam.step_mlp(&mut net, &grads, cfg.lr)?;
            obj.after_step(&mut net, cfg.lr)?;
        }
        if !net.is_finite() {
            return Err(Error::Divergence {
                epoch,
                msg: "non-finite parameters".into(),
            });
        }
        train_hist.push(total / n as f64);
        epochs_run = epoch + 1;
        if let Some(v) = obj.val_loss(&net)? {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("validation loss {v}"),
                });
            }
            val_hist.push(v);
            let improved = best.as_ref().map_or(true, |(b, _, _)| v < *b);
            if improved {
                best = Some((v, net.clone(), epoch));
            } else if epoch - best.as_ref().unwrap().2 >= cfg.patience {
                break;
            }
        }
        log::debug!("epoch {epoch}: train {:.6e}", train_hist.last().unwrap());
    }
    let (net, best_epoch) = match best {
        Some((_, net, e)) => (net, e),
        None => (net, epochs_run - 1),
    };
    Ok(TrainOutcome {
        net,
        epochs_run,
        best_epoch,
        train_loss: train_hist,
        val_loss: val_hist,
    })
}
