//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use ccil_core::dynamics::{default_sweep_grid, RegConfig, SelectionCriterion};
use ccil_core::eval::EvalConfig;
use ccil_core::labels::GenConfig;
use ccil_core::nn::TrainConfig;
use ccil_core::pendulum::{Pendulum, PendulumParams};
use ccil_core::policy::BcConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvBlock {
    pub name: String,
    /// Overrides the named environment's physical parameters.
    #[serde(default)]
    pub params: Option<PendulumParams>,
}

impl EnvBlock {
    pub fn build(&self) -> Result<Pendulum, CliError> {
        let env = Pendulum::by_name(&self.name)?;
        match &self.params {
            None => Ok(env),
            Some(p) => Ok(Pendulum::new(p.clone())?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoBlock {
    pub n_traj: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_horizon() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsBlock {
    /// Candidate regularizations; empty means the 24-cell hinge sweep.
    pub grid: Vec<RegConfig>,
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub criterion: SelectionCriterion,
}

impl Default for DynamicsBlock {
    fn default() -> Self {
        Self {
            grid: Vec::new(),
            train: TrainConfig::default(),
            val_fraction: 0.2,
            criterion: SelectionCriterion::Disturbed,
        }
    }
}

impl DynamicsBlock {
    pub fn candidates(&self) -> Vec<RegConfig> {
        if self.grid.is_empty() {
            default_sweep_grid()
        } else {
            self.grid.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub env: EnvBlock,
    pub demos: DemoBlock,
    #[serde(default)]
    pub dynamics: DynamicsBlock,
    #[serde(default)]
    pub labels: GenConfig,
    #[serde(default)]
    pub policy: BcConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Master seed; every stage seed is set from it.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::msg(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::msg(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Sets the master seed and pushes it into every stage.
    pub fn resolve_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.dynamics.train.seed = seed;
        self.labels.seed = seed;
        self.policy.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.env.build()?;
        if self.demos.n_traj < 2 || self.demos.horizon == 0 {
            return Err(CliError::msg("demos: need n_traj >= 2 (train/validation split) and horizon >= 1"));
        }
        for reg in self.dynamics.candidates() {
            reg.validate()?;
        }
        self.dynamics.train.validate()?;
        if !(self.dynamics.val_fraction > 0.0 && self.dynamics.val_fraction < 1.0) {
            return Err(CliError::msg("dynamics: val_fraction must be in (0, 1)"));
        }
        self.labels.validate()?;
        self.policy.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"env": {"name": "pendulum"}, "demos": {"n_traj": 5}}"#).unwrap();
        assert_eq!(cfg.demos.horizon, 500);
        assert_eq!(cfg.dynamics.candidates().len(), 24);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = serde_json::from_str::<PipelineConfig>(
            r#"{"env": {"name": "pendulum"}, "demos": {"n_traj": 5}, "labels": {"delta": 1}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
    }
}
