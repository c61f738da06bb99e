use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{Dataset, Transition};
use crate::error::{Error, Result};
use crate::nn::{load_mlp, save_mlp, Mlp};

use super::LipschitzReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    None,
    Spectral,
    Hinge,
    Slack,
    Weighted,
}

impl std::fmt::Display for RegMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RegMode::None => "none",
            RegMode::Spectral => "spectral",
            RegMode::Hinge => "hinge",
            RegMode::Slack => "slack",
            RegMode::Weighted => "weighted",
        };
        f.write_str(s)
    }
}

/// How a local Lipschitz violation is penalized. `Indicator` counts
/// violations and back-propagates the hinge gradient (straight-through).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyForm {
    #[default]
    Hinge,
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub mode: RegMode,
    /// Target local Lipschitz bound `L` (hinge and slack modes).
    pub lipschitz: Option<f64>,
    /// Per-layer spectral bound `L̄` (spectral and weighted modes).
    pub per_layer_bound: Option<f64>,
    /// Penalty weight.
    pub lambda: f64,
    /// Std of the state perturbation used to estimate local Lipschitz.
    pub sigma: f64,
    /// Perturbation draws per training point and step.
    pub n_perturb: usize,
    pub beta: f64,
    pub lambda_bar: f64,
    pub penalty_form: PenaltyForm,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            mode: RegMode::None,
            lipschitz: None,
            per_layer_bound: None,
            lambda: 0.5,
            sigma: 3e-4,
            n_perturb: 1,
            beta: 10.0,
            lambda_bar: 0.1,
            penalty_form: PenaltyForm::Hinge,
        }
    }
}

impl RegConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn spectral(per_layer_bound: f64) -> Self {
        Self {
            mode: RegMode::Spectral,
            per_layer_bound: Some(per_layer_bound),
            ..Self::default()
        }
    }

    pub fn hinge(lipschitz: f64, lambda: f64, sigma: f64) -> Self {
        Self {
            mode: RegMode::Hinge,
            lipschitz: Some(lipschitz),
            lambda,
            sigma,
            ..Self::default()
        }
    }

    pub fn slack(lipschitz: f64, sigma: f64) -> Self {
        Self {
            mode: RegMode::Slack,
            lipschitz: Some(lipschitz),
            sigma,
            ..Self::default()
        }
    }

    pub fn weighted(per_layer_bound: f64) -> Self {
        Self {
            mode: RegMode::Weighted,
            per_layer_bound: Some(per_layer_bound),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("{} mode: {m}", self.mode)));
        match self.mode {
            RegMode::None => {}
            RegMode::Spectral | RegMode::Weighted => match self.per_layer_bound {
                Some(b) if b > 0.0 => {}
                _ => return bad("needs per_layer_bound > 0"),
            },
            RegMode::Hinge | RegMode::Slack => {
                match self.target_lipschitz() {
                    Some(l) if l > 0.0 => {}
                    _ => return bad("needs lipschitz > 0 (or per_layer_bound)"),
                }
                if !(self.sigma > 0.0) {
                    return bad("needs sigma > 0");
                }
                if self.n_perturb == 0 {
                    return bad("needs n_perturb >= 1");
                }
            }
        }
        if !(self.lambda >= 0.0) {
            return bad("needs lambda >= 0");
        }
        Ok(())
    }

    /// `L` enforced by the penalty: the configured value, else `L̄²`.
    pub fn target_lipschitz(&self) -> Option<f64> {
        self.lipschitz.or(self.per_layer_bound.map(|b| b * b))
    }

    /// Whole-network `L` used for model selection: `L̄²` for the
    /// projected modes, the penalty target otherwise.
    pub fn effective_lipschitz(&self) -> Option<f64> {
        match self.mode {
            RegMode::None => None,
            RegMode::Spectral | RegMode::Weighted => self.per_layer_bound.map(|b| b * b),
            RegMode::Hinge | RegMode::Slack => self.target_lipschitz(),
        }
    }

    pub fn describe(&self) -> String {
        let f = |o: Option<f64>| o.map_or("-".to_string(), |v| format!("{v}"));
        format!(
            "{}_Lbar{}_L{}_lam{}_sig{}",
            self.mode,
            f(self.per_layer_bound),
            f(self.lipschitz),
            self.lambda,
            self.sigma
        )
    }
}

/// Affine standardization of network inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

fn mean_std(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for k in 0..dim {
            var[k] += (r[k] - mean[k]).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-8 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(d_in: usize, d_out: usize) -> Self {
        Self {
            in_mean: vec![0.0; d_in],
            in_std: vec![1.0; d_in],
            out_mean: vec![0.0; d_out],
            out_std: vec![1.0; d_out],
        }
    }

    /// Statistics of `[s, a]` inputs and `s_next - s` targets.
    pub fn fit(d: &Dataset) -> Self {
        let xs: Vec<Vec<f64>> = d.transitions().iter().map(dyn_input).collect();
        let ys: Vec<Vec<f64>> = d.transitions().iter().map(residual_target).collect();
        let (in_mean, in_std) = mean_std(&xs, d.d_s() + d.d_a());
        let (out_mean, out_std) = mean_std(&ys, d.d_s());
        Self {
            in_mean,
            in_std,
            out_mean,
            out_std,
        }
    }

    /// Fits only the input statistics over arbitrary rows; outputs identity.
    pub fn fit_inputs(rows: &[Vec<f64>], d_out: usize) -> Self {
        let d_in = rows.first().map_or(0, |r| r.len());
        let (in_mean, in_std) = mean_std(rows, d_in);
        Self {
            in_mean,
            in_std,
            out_mean: vec![0.0; d_out],
            out_std: vec![1.0; d_out],
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.in_mean.iter().zip(&self.in_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn decode(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.out_mean.iter().zip(&self.out_std))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }

    pub fn encode_target(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.out_mean.iter().zip(&self.out_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

pub(crate) fn dyn_input(t: &Transition) -> Vec<f64> {
    t.s.iter().chain(t.a.iter()).copied().collect()
}

pub(crate) fn residual_target(t: &Transition) -> Vec<f64> {
    t.s_next.iter().zip(t.s.iter()).map(|(n, c)| n - c).collect()
}

/// Trained residual dynamics model.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub net: Mlp,
    pub norm: Normalizer,
    pub reg: RegConfig,
    pub d_s: usize,
    pub d_a: usize,
    /// Mean validation `||f̂(s,a) + s - s_next||`.
    pub eps_val: f64,
    pub lipschitz_report: LipschitzReport,
}

impl DynamicsModel {
    /// Wraps a network whose input is `[s, a]` and output the residual.
    pub fn from_parts(net: Mlp, norm: Normalizer, reg: RegConfig, d_s: usize, d_a: usize) -> Result<Self> {
        if net.input_dim() != d_s + d_a {
            return Err(Error::dim(d_s + d_a, net.input_dim(), "dynamics net input"));
        }
        if net.output_dim() != d_s {
            return Err(Error::dim(d_s, net.output_dim(), "dynamics net output"));
        }
        if norm.in_std.iter().chain(&norm.out_std).any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("normalization stds must be > 0".into()));
        }
        Ok(Self {
            net,
            norm,
            reg,
            d_s,
            d_a,
            eps_val: 0.0,
            lipschitz_report: LipschitzReport::default(),
        })
    }

    fn check(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.d_s {
            return Err(Error::dim(self.d_s, s.len(), "dynamics state"));
        }
        if a.len() != self.d_a {
            return Err(Error::dim(self.d_a, a.len(), "dynamics action"));
        }
        Ok(())
    }

    /// Raw residual prediction `f̂(s, a)`.
    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check(s, a)?;
        Ok(self.predict_unchecked(s, a))
    }

    pub(crate) fn predict_unchecked(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        self.norm.decode(&self.net.forward_unchecked(&self.norm.encode(&x)))
    }

    /// Predicted next state `s + f̂(s, a)`.
    pub fn next_state(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let r = self.predict(s, a)?;
        Ok(s.iter().zip(r).map(|(x, d)| x + d).collect())
    }

    /// Raw Jacobian `∂f̂/∂s` (`d_s x d_s`).
    pub fn state_jacobian(&self, s: &[f64], a: &[f64]) -> Result<Array2<f64>> {
        self.check(s, a)?;
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        let jn = self.net.grad_input(&self.norm.encode(&x))?;
        Ok(Array2::from_shape_fn((self.d_s, self.d_s), |(i, j)| {
            self.norm.out_std[i] * jn[[i, j]] / self.norm.in_std[j]
        }))
    }

    /// Standardized-space batch prediction over rows of `[s, a]`.
    pub fn net_forward_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.forward_batch(z)
    }

    pub fn metadata(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        m.insert("kind".into(), json!("dynamics"));
        m.insert("mode".into(), json!(self.reg.mode));
        m.insert("per_layer_bound".into(), json!(self.reg.per_layer_bound));
        m.insert("L".into(), json!(self.reg.effective_lipschitz()));
        m.insert("lambda".into(), json!(self.reg.lambda));
        m.insert("sigma".into(), json!(self.reg.sigma));
        m.insert("reg".into(), serde_json::to_value(&self.reg).expect("reg serializes"));
        m.insert("eps_val".into(), json!(self.eps_val));
        m.insert("normalization".into(), serde_json::to_value(&self.norm).expect("norm serializes"));
        m.insert(
            "lipschitz_report".into(),
            serde_json::to_value(&self.lipschitz_report).expect("report serializes"),
        );
        m.insert("d_s".into(), json!(self.d_s));
        m.insert("d_a".into(), json!(self.d_a));
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_mlp(path, &self.net, &self.metadata())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = load_mlp(path, None)?;
        let field = |k: &str| -> Result<&Value> {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata `{k}`", path.display())))
        };
        let parse = |k: &str, e: serde_json::Error| {
            Error::Checkpoint(format!("{}: metadata `{k}`: {e}", path.display()))
        };
        if field("kind")? != "dynamics" {
            return Err(Error::Checkpoint(format!("{} is not a dynamics checkpoint", path.display())));
        }
        let reg: RegConfig = serde_json::from_value(field("reg")?.clone()).map_err(|e| parse("reg", e))?;
        let norm: Normalizer =
            serde_json::from_value(field("normalization")?.clone()).map_err(|e| parse("normalization", e))?;
        let report: LipschitzReport = serde_json::from_value(field("lipschitz_report")?.clone())
            .map_err(|e| parse("lipschitz_report", e))?;
        let d_s = field("d_s")?.as_u64().ok_or_else(|| Error::Checkpoint("d_s".into()))? as usize;
        let d_a = field("d_a")?.as_u64().ok_or_else(|| Error::Checkpoint("d_a".into()))? as usize;
        let eps_val = field("eps_val")?.as_f64().ok_or_else(|| Error::Checkpoint("eps_val".into()))?;
        let mut m = Self::from_parts(net, norm, reg, d_s, d_a)?;
        m.eps_val = eps_val;
        m.lipschitz_report = report;
        Ok(m)
    }
}
