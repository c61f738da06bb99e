//! Behavior cloning on expert pairs, optionally augmented with corrective
//! labels, and the input-noise (NoiseBC) baseline.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{ActionVec, Dataset, StateVec};
use crate::dynamics::Normalizer;
use crate::error::{Error, Result};
use crate::labels::{labels_hash, CorrectiveLabel};
use crate::nn::{fit, load_mlp, save_mlp, Gradients, Mlp, Objective, TrainConfig};
use crate::pendulum::Controller;
use crate::rng::RngStream;

pub const HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub train: TrainConfig,
    /// Input noise in standardized state units; 0 is plain BC.
    pub noise_bc_std: f64,
    /// Loss weight of corrective labels relative to expert pairs.
    pub aug_weight: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), noise_bc_std: 0.0, aug_weight: 1.0 }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.noise_bc_std >= 0.0 && self.noise_bc_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_bc_std must be >= 0, got {}", self.noise_bc_std)));
        }
        if !(self.aug_weight >= 0.0 && self.aug_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("aug_weight must be >= 0, got {}", self.aug_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub net: Mlp,
    pub norm: Normalizer,
    pub action_low: f64,
    pub action_high: f64,
    pub metadata: BTreeMap<String, Value>,
}

impl Policy {
    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Network output clamped to the action bounds.
    pub fn act(&self, s: &[f64]) -> Result<ActionVec> {
        if s.len() != self.state_dim() {
            return Err(Error::dim(self.state_dim(), s.len(), "policy state"));
        }
        let out = self.net.forward(&self.norm.encode(s))?;
        ActionVec::new(out.into_iter().map(|v| v.clamp(self.action_low, self.action_high)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.metadata.clone();
        meta.insert("kind".into(), json!("policy"));
        meta.insert("normalization".into(), serde_json::to_value(&self.norm).expect("norm serializes"));
        meta.insert("action_bounds".into(), json!([self.action_low, self.action_high]));
        save_mlp(path, &self.net, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, mut meta) = load_mlp(path, None)?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if meta.remove("kind") != Some(json!("policy")) {
            return Err(bad("not a policy checkpoint"));
        }
        let norm: Normalizer = meta
            .remove("normalization")
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| bad("missing or invalid `normalization`"))?;
        let bounds: [f64; 2] = meta
            .remove("action_bounds")
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| bad("missing or invalid `action_bounds`"))?;
        Ok(Self { net, norm, action_low: bounds[0], action_high: bounds[1], metadata: meta })
    }
}

impl Controller for Policy {
    fn act(&self, s: &StateVec) -> Result<ActionVec> {
        Policy::act(self, s)
    }
}

struct BcObjective {
    x: Array2<f64>,
    y: Array2<f64>,
    weights: Vec<f64>,
    n_expert: usize,
    noise_std: f64,
    rng: RngStream,
}

impl Objective for BcObjective {
    fn len(&self) -> usize {
        self.x.nrows()
    }

    fn batch_grad(&mut self, net: &Mlp, idx: &[usize]) -> Result<(f64, Gradients)> {
        let mut xb = self.x.select(Axis(0), idx);
        if self.noise_std > 0.0 {
            for (row, &i) in xb.rows_mut().into_iter().zip(idx) {
                if i < self.n_expert {
                    row.into_iter().for_each(|v| *v += self.noise_std * self.rng.normal());
                }
            }
        }
        let yb = self.y.select(Axis(0), idx);
        let cache = net.forward_cached(xb.view())?;
        let mut dy = &cache.output - &yb;
        let b = idx.len() as f64;
        let mut loss = 0.0;
        for (mut row, &i) in dy.rows_mut().into_iter().zip(idx) {
            let w = self.weights[i];
            loss += w * row.dot(&row);
            row *= 2.0 * w / b;
        }
        let (g, _) = net.backward(&cache, dy.view());
        Ok((loss / b, g))
    }
}

/// Trains a (64, 64) ReLU policy on the expert pairs of `d` plus the
/// `(s_g, a_g)` pairs of `aug`. Labels are left out entirely when
/// `aug_weight` is 0, which reproduces plain BC exactly.
pub fn train_bc(
    d: &Dataset,
    aug: &[CorrectiveLabel],
    action_bounds: (f64, f64),
    cfg: &BcConfig,
) -> Result<Policy> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::InvalidArgument("behavior cloning needs a non-empty dataset".into()));
    }
    let (d_s, d_a) = (d.d_s(), d.d_a());
    for (i, l) in aug.iter().enumerate() {
        if l.s_g.dim() != d_s || l.a_g.dim() != d_a {
            return Err(Error::dim(d_s + d_a, l.s_g.dim() + l.a_g.dim(), format!("corrective label {i}")));
        }
    }
    let used: &[CorrectiveLabel] = if cfg.aug_weight > 0.0 { aug } else { &[] };
    let mut states: Vec<Vec<f64>> = d.transitions().iter().map(|t| t.s.to_vec()).collect();
    let mut actions: Vec<Vec<f64>> = d.transitions().iter().map(|t| t.a.to_vec()).collect();
    states.extend(used.iter().map(|l| l.s_g.to_vec()));
    actions.extend(used.iter().map(|l| l.a_g.to_vec()));
    let n_expert = d.len();
    let mut weights = vec![1.0; n_expert];
    weights.resize(states.len(), cfg.aug_weight);

    // statistics from the expert states only, so labels cannot shift them
    let norm = Normalizer::fit_inputs(&states[..n_expert], d_a);
    let x = Array2::from_shape_fn((states.len(), d_s), |(i, j)| (states[i][j] - norm.in_mean[j]) / norm.in_std[j]);
    let y = Array2::from_shape_fn((actions.len(), d_a), |(i, j)| actions[i][j]);
    let mut obj = BcObjective {
        x,
        y,
        weights,
        n_expert,
        noise_std: cfg.noise_bc_std,
        rng: RngStream::new(cfg.train.seed, "bc/noise"),
    };
    let net = Mlp::init(&[d_s, HIDDEN[0], HIDDEN[1], d_a], cfg.train.seed)?;
    let outcome = fit(net, &mut obj, &cfg.train)?;

    let mut metadata = BTreeMap::new();
    metadata.insert("dataset_sha256".into(), json!(d.content_hash()));
    metadata.insert("aug_labels_sha256".into(), json!(labels_hash(aug)));
    metadata.insert("n_aug_labels".into(), json!(aug.len()));
    metadata.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    metadata.insert("final_train_loss".into(), json!(outcome.train_loss.last()));
    Ok(Policy { net: outcome.net, norm, action_low: action_bounds.0, action_high: action_bounds.1, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetMeta, Transition};
    use crate::labels::Technique;
    use crate::pendulum::Pendulum;

    fn small_cfg(epochs: usize) -> BcConfig {
        BcConfig { train: TrainConfig { epochs, batch_size: 32, ..Default::default() }, ..Default::default() }
    }

    fn label(s: [f64; 3], a: f64) -> CorrectiveLabel {
        CorrectiveLabel {
            s_g: StateVec::new(s.to_vec()).unwrap(),
            a_g: ActionVec::new(vec![a]).unwrap(),
            s_target: StateVec::new(s.to_vec()).unwrap(),
            technique: Technique::Backtrack,
            opt_residual: 0.0,
            anchor_distance: 0.0,
            delta_norm: 0.0,
            bound: 0.0,
            source: (0, 0),
        }
    }

    #[test]
    fn overfits_a_repeated_pair() {
        let tr = |t| Transition {
            traj_id: 0,
            t,
            s: StateVec::new(vec![0.2, 0.9, -0.4]).unwrap(),
            a: ActionVec::new(vec![1.25]).unwrap(),
            s_next: StateVec::new(vec![0.2, 0.9, -0.4]).unwrap(),
        };
        let meta = DatasetMeta { d_s: 3, d_a: 1, env_name: "pendulum".into(), seed: 0 };
        let d = Dataset::new(meta, (0..64).map(tr).collect()).unwrap();
        let p = train_bc(&d, &[], (-3.0, 3.0), &small_cfg(200)).unwrap();
        let a = p.act(&[0.2, 0.9, -0.4]).unwrap();
        assert!((a[0] - 1.25).abs() < 1e-3, "{}", a[0]);
    }

    #[test]
    fn zero_weight_and_zero_noise_match_plain_bc() {
        let env = Pendulum::by_name("pendulum").unwrap();
        let d = env.gen_demos(2, 50, 0).unwrap();
        let plain = train_bc(&d, &[], (-3.0, 3.0), &small_cfg(3)).unwrap();
        let labels = vec![label([0.0, 1.0, 0.3], 2.0); 10];
        let zero = BcConfig { aug_weight: 0.0, ..small_cfg(3) };
        assert_eq!(train_bc(&d, &labels, (-3.0, 3.0), &zero).unwrap().net, plain.net);
        let noisy0 = BcConfig { noise_bc_std: 0.0, ..small_cfg(3) };
        assert_eq!(train_bc(&d, &[], (-3.0, 3.0), &noisy0).unwrap().net, plain.net);
        let with = train_bc(&d, &labels, (-3.0, 3.0), &small_cfg(3)).unwrap();
        assert_ne!(with.net, plain.net);
        assert_eq!((with.state_dim(), with.action_dim()), (3, 1));
        let noisy = BcConfig { noise_bc_std: 0.1, ..small_cfg(3) };
        assert_ne!(train_bc(&d, &[], (-3.0, 3.0), &noisy).unwrap().net, plain.net);
    }

    #[test]
    fn act_clamps_and_checks_dimension() {
        let env = Pendulum::by_name("pendulum").unwrap();
        let d = env.gen_demos(1, 20, 0).unwrap();
        let mut p = train_bc(&d, &[], (-3.0, 3.0), &small_cfg(1)).unwrap();
        for l in p.net.layers_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        assert_eq!(p.act(&[0.0, 1.0, 0.0]).unwrap()[0], 0.0);
        p.net.layers_mut().last_mut().unwrap().b.fill(10.0);
        assert_eq!(p.act(&[0.0, 1.0, 0.0]).unwrap()[0], 3.0);
        assert!(p.act(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn mismatched_labels_rejected() {
        let env = Pendulum::by_name("pendulum").unwrap();
        let d = env.gen_demos(1, 20, 0).unwrap();
        let mut l = label([0.0, 1.0, 0.0], 0.0);
        l.s_g = StateVec::new(vec![0.0, 1.0]).unwrap();
        assert!(train_bc(&d, &[l], (-3.0, 3.0), &small_cfg(1)).is_err());
        assert!(train_bc(&Dataset::empty(d.meta().clone()), &[], (-3.0, 3.0), &small_cfg(1)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let env = Pendulum::by_name("pendulum").unwrap();
        let d = env.gen_demos(1, 20, 0).unwrap();
        let p = train_bc(&d, &[], (-3.0, 3.0), &small_cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bc.json");
        p.save(&path).unwrap();
        let q = Policy::load(&path).unwrap();
        assert_eq!(q.net, p.net);
        assert_eq!(q.norm, p.norm);
        assert_eq!(q.metadata, p.metadata);
        let s = [0.3, -0.95, 1.1];
        assert_eq!(q.act(&s).unwrap(), p.act(&s).unwrap());
    }
}
