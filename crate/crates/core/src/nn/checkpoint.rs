use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

use super::{Layer, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    /// Row-major `out x in`.
    w: Vec<f64>,
    b: Vec<f64>,
}

/// On-disk network: widths, activation tag, row-major parameters and a
/// free-form metadata map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    widths: Vec<usize>,
    activation: String,
    layers: Vec<LayerRecord>,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn new(net: &Mlp, metadata: BTreeMap<String, Value>) -> Self {
        Self {
            widths: net.widths().to_vec(),
            activation: "relu".into(),
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    w: l.w.iter().copied().collect(),
                    b: l.b.to_vec(),
                })
                .collect(),
            metadata,
        }
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        if self.activation != "relu" {
            return Err(Error::Checkpoint(format!(
                "unsupported activation `{}`",
                self.activation
            )));
        }
        if self.widths.len() != self.layers.len() + 1 {
            return Err(Error::Checkpoint(format!(
                "{} widths for {} layers",
                self.widths.len(),
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, rec) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (self.widths[i], self.widths[i + 1]);
            let w = Array2::from_shape_vec((fan_out, fan_in), rec.w.clone())
                .map_err(|e| Error::Checkpoint(format!("layer {i} weights: {e}")))?;
            if rec.b.len() != fan_out {
                return Err(Error::Checkpoint(format!(
                    "layer {i} bias has {} entries, expected {fan_out}",
                    rec.b.len()
                )));
            }
            layers.push(Layer {
                w,
                b: Array1::from(rec.b.clone()),
            });
        }
        let net = Mlp::from_layers(layers)?;
        if !net.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }
}

pub fn save_mlp(path: &Path, net: &Mlp, metadata: &BTreeMap<String, Value>) -> Result<()> {
    let ck = Checkpoint::new(net, metadata.clone());
    std::fs::write(path, ck.to_json()).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected_widths` set, a shape mismatch is an
/// error.
pub fn load_mlp(
    path: &Path,
    expected_widths: Option<&[usize]>,
) -> Result<(Mlp, BTreeMap<String, Value>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let net = ck.to_mlp()?;
    if let Some(w) = expected_widths {
        if net.widths() != w {
            return Err(Error::Checkpoint(format!(
                "{}: widths {:?}, expected {:?}",
                path.display(),
                net.widths(),
                w
            )));
        }
    }
    Ok((net, ck.metadata))
}
