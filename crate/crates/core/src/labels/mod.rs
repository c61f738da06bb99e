//! Corrective labels: states near the demonstrations paired with actions
//! that lead back onto them, with per-label error bounds.

mod generate;
mod io;
mod oracle;
mod solver;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{ActionVec, StateVec};
use crate::error::{Error, Result};

pub use generate::{
    backtrack_label, disturbed_action_label, generate_labels, BoundConstants, LabelReport, Summary,
};
pub use io::{labels_hash, load_labels, save_labels};
pub use oracle::{nearest_expert_state, oracle_action, oracle_labels_known_dynamics};
pub use solver::{golden_section, root_residual, solve_root, ResidualModel, RootSolution, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Backtrack,
    Disturbed,
    Oracle,
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Backtrack => "backtrack",
            Self::Disturbed => "disturbed",
            Self::Oracle => "oracle",
        })
    }
}

/// Where the Lipschitz constants entering the bounds come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KSource {
    /// Spectral-norm product of the trained layers.
    PerLayerProduct,
    /// Sampled local estimates, maximized over anchors.
    Sampled,
}

impl FromStr for KSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer-product" => Ok(Self::PerLayerProduct),
            "sampled" => Ok(Self::Sampled),
            other => Err(Error::InvalidArgument(format!("unknown K source {other:?}"))),
        }
    }
}

/// Model error term used in the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsSource {
    /// The model's mean validation error.
    ValidationMean,
    /// The model's error on the anchoring expert transition.
    PerAnchor,
}

/// Which label families to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TechniqueSet {
    Backtrack,
    Disturbed,
    Both,
}

impl TechniqueSet {
    pub fn includes(self, t: Technique) -> bool {
        matches!(
            (self, t),
            (Self::Both, Technique::Backtrack | Technique::Disturbed)
                | (Self::Backtrack, Technique::Backtrack)
                | (Self::Disturbed, Technique::Disturbed)
        )
    }
}

impl FromStr for TechniqueSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backtrack" => Ok(Self::Backtrack),
            "disturbed" => Ok(Self::Disturbed),
            "both" => Ok(Self::Both),
            other => Err(Error::InvalidArgument(format!("unknown technique {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub technique: TechniqueSet,
    pub delta_std: f64,
    pub eps_rej: f64,
    pub eps_opt_tol: f64,
    pub max_iters: usize,
    pub labels_per_transition: usize,
    pub k_source: KSource,
    pub eps_source: EpsSource,
    /// Drop labels whose path to the target crosses a wall. `None` turns
    /// the filter on exactly when the environment has walls.
    pub skip_wall_crossing: Option<bool>,
    /// Speed range over which the true-dynamics constant is computed.
    pub true_speed_limit: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            technique: TechniqueSet::Disturbed,
            delta_std: 1e-5,
            eps_rej: 0.01,
            eps_opt_tol: 1e-6,
            max_iters: 100,
            labels_per_transition: 1,
            k_source: KSource::PerLayerProduct,
            eps_source: EpsSource::ValidationMean,
            skip_wall_crossing: None,
            true_speed_limit: 8.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("delta_std", self.delta_std),
            ("eps_opt_tol", self.eps_opt_tol),
            ("true_speed_limit", self.true_speed_limit),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("labels: {name} must be > 0, got {v}")));
            }
        }
        // infinity disables distance rejection
        if !(self.eps_rej >= 0.0) {
            return Err(Error::InvalidArgument(format!("labels: eps_rej must be >= 0, got {}", self.eps_rej)));
        }
        if self.max_iters == 0 || self.labels_per_transition == 0 {
            return Err(Error::InvalidArgument("labels: max_iters and labels_per_transition must be >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn solver(&self) -> SolverConfig {
        SolverConfig { tol: self.eps_opt_tol, max_iters: self.max_iters, ..SolverConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectiveLabel {
    pub s_g: StateVec,
    pub a_g: ActionVec,
    pub s_target: StateVec,
    pub technique: Technique,
    pub opt_residual: f64,
    pub anchor_distance: f64,
    pub delta_norm: f64,
    pub bound: f64,
    /// `(trajectory, step)` of the transition the label came from.
    pub source: (u64, u64),
}
