//! Bound-driven model selection over a hyper-parameter sweep.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Transition;
use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::{DynamicsModel, RegConfig, RegMode};

/// Which corrective-label bound a model is selected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionCriterion {
    Backtrack,
    Disturbed,
}

impl fmt::Display for SelectionCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Backtrack => "backtrack",
            Self::Disturbed => "disturbed",
        })
    }
}

impl FromStr for SelectionCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backtrack" => Ok(Self::Backtrack),
            "disturbed" => Ok(Self::Disturbed),
            other => Err(Error::InvalidArgument(format!("unknown selection criterion {other:?}"))),
        }
    }
}

fn score_from(eps: f64, l: f64, criterion: SelectionCriterion, residual_scale: f64) -> f64 {
    match criterion {
        SelectionCriterion::Backtrack => eps + 2.0 * l * residual_scale,
        SelectionCriterion::Disturbed => 0.001 * l + (1.0 + l) * eps,
    }
}

/// Error-bound score of `model` (lower is better). `residual_scale` is the
/// mean transition length `||s' - s||` of the training data.
pub fn model_selection_score(model: &DynamicsModel, criterion: SelectionCriterion, residual_scale: f64) -> Result<f64> {
    let l = model.reg.effective_lipschitz().ok_or_else(|| {
        Error::InvalidArgument(format!("model {} has no Lipschitz constant to score", model.reg.describe()))
    })?;
    Ok(score_from(model.eps_val, l, criterion, residual_scale))
}

/// Index of the best-scoring model; ties go to smaller `eps_val`, then to
/// the earlier entry.
pub fn select_best(models: &[DynamicsModel], criterion: SelectionCriterion, residual_scale: f64) -> Result<usize> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no candidate models to select from".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in models.iter().enumerate() {
        let s = model_selection_score(m, criterion, residual_scale)?;
        let better = match best {
            None => true,
            Some((j, bs)) => s < bs || (s == bs && m.eps_val < models[j].eps_val),
        };
        if better {
            best = Some((i, s));
        }
    }
    Ok(best.expect("non-empty").0)
}

/// The 24-cell hinge sweep: `L̄ × λ × σ` with penalty target `L = L̄²`.
pub fn default_sweep_grid() -> Vec<RegConfig> {
    let mut out = Vec::with_capacity(24);
    for lbar in [2.0, 3.0, 5.0, 10.0] {
        for lambda in [0.3, 0.5] {
            for sigma in [1e-4, 3e-4, 5e-4] {
                let mut c = RegConfig::hinge(lbar * lbar, lambda, sigma);
                c.per_layer_bound = Some(lbar);
                out.push(c);
            }
        }
    }
    out
}

/// A pair of hinge models that differ only in `λ` where the larger `λ`
/// violated its bound at more anchors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityBreak {
    pub lower: String,
    pub higher: String,
    pub lower_violation: f64,
    pub higher_violation: f64,
}

fn violation_fraction(m: &DynamicsModel, anchors: &[&Transition], seed: u64) -> Result<f64> {
    let l = m.reg.target_lipschitz().expect("hinge has a target");
    let mut rng = RngStream::new(seed, "dynamics/monotonicity");
    let mut bad = 0usize;
    for tr in anchors {
        if m.standardized_estimate(&tr.s, &tr.a, m.reg.sigma, 16, &mut rng)?.max > l {
            bad += 1;
        }
    }
    Ok(bad as f64 / anchors.len().max(1) as f64)
}

/// Checks that raising `λ` among otherwise identical hinge models never
/// raises the violating fraction of `anchors`. Breaks are returned rather
/// than treated as errors.
pub fn hinge_lambda_monotonicity(
    models: &[DynamicsModel],
    anchors: &[Transition],
    max_anchors: usize,
    seed: u64,
) -> Result<Vec<MonotonicityBreak>> {
    let subset = super::lipschitz::stride_anchors(anchors, max_anchors);
    let hinge: Vec<&DynamicsModel> = models.iter().filter(|m| m.reg.mode == RegMode::Hinge).collect();
    let mut fractions = Vec::with_capacity(hinge.len());
    for m in &hinge {
        fractions.push(violation_fraction(m, &subset, seed)?);
    }
    let mut breaks = Vec::new();
    for (i, a) in hinge.iter().enumerate() {
        for (j, b) in hinge.iter().enumerate() {
            let same_cell = a.reg.lipschitz == b.reg.lipschitz && a.reg.sigma == b.reg.sigma;
            if same_cell && a.reg.lambda < b.reg.lambda && fractions[j] > fractions[i] {
                breaks.push(MonotonicityBreak {
                    lower: a.reg.describe(),
                    higher: b.reg.describe(),
                    lower_violation: fractions[i],
                    higher_violation: fractions[j],
                });
            }
        }
    }
    for b in &breaks {
        log::warn!(
            "raising lambda {} -> {} raised the violating fraction {:.3} -> {:.3}",
            b.lower,
            b.higher,
            b.lower_violation,
            b.higher_violation
        );
    }
    Ok(breaks)
}
