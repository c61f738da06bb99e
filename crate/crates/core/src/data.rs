//! Dataset types, JSON-lines persistence and dataset statistics.
//!
//! On disk a dataset is one meta line followed by one transition per line:
//!
//! ```text
//! {"d_s":3,"d_a":1,"env":"pendulum","seed":0}
//! {"traj":0,"t":0,"s":[..],"a":[..],"s_next":[..]}
//! ```
//!
//! Reals are written with the shortest representation that round-trips
//! bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

macro_rules! real_vec {
    ($name:ident, $what:literal) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            /// Wraps `values`, rejecting non-finite entries.
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        concat!($what, " entry {} is {}"),
                        i, values[i]
                    )));
                }
                Ok(Self(values))
            }

            pub fn zeros(dim: usize) -> Self {
                Self(vec![0.0; dim])
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<$name> for Vec<f64> {
            fn from(v: $name) -> Vec<f64> {
                v.0
            }
        }

        impl RealVec for $name {
            fn values_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }
    };
}

/// Mutable access shared by state and action vectors.
pub trait RealVec: Clone + std::ops::Deref<Target = [f64]> {
    fn values_mut(&mut self) -> &mut [f64];
}

real_vec!(StateVec, "state");
real_vec!(ActionVec, "action");

/// Euclidean distance between two equal-length slices.
pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(rename = "traj")]
    pub traj_id: u64,
    pub t: u64,
    pub s: StateVec,
    pub a: ActionVec,
    pub s_next: StateVec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub d_s: usize,
    pub d_a: usize,
    #[serde(rename = "env")]
    pub env_name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    transitions: Vec<Transition>,
}

impl Dataset {
    /// Builds a dataset, validating dimensions and per-trajectory step order.
    pub fn new(meta: DatasetMeta, transitions: Vec<Transition>) -> Result<Self> {
        let mut last_t: HashMap<u64, u64> = HashMap::new();
        for (i, tr) in transitions.iter().enumerate() {
            check_transition(&meta, tr, &format!("transition {i}"))?;
            if let Some(prev) = last_t.get(&tr.traj_id) {
                if tr.t != prev + 1 {
                    return Err(Error::InvalidArgument(format!(
                        "transition {i}: trajectory {} step {} does not follow step {}",
                        tr.traj_id, tr.t, prev
                    )));
                }
            }
            last_t.insert(tr.traj_id, tr.t);
        }
        Ok(Self { meta, transitions })
    }

    pub fn empty(meta: DatasetMeta) -> Self {
        Self {
            meta,
            transitions: Vec::new(),
        }
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn d_s(&self) -> usize {
        self.meta.d_s
    }

    pub fn d_a(&self) -> usize {
        self.meta.d_a
    }

    /// Distinct trajectory ids in order of first appearance.
    pub fn traj_ids(&self) -> Vec<u64> {
        let mut seen = std::collections::HashSet::new();
        self.transitions
            .iter()
            .filter(|t| seen.insert(t.traj_id))
            .map(|t| t.traj_id)
            .collect()
    }

    /// Transitions grouped by trajectory id.
    pub fn by_trajectory(&self) -> BTreeMap<u64, Vec<&Transition>> {
        let mut out: BTreeMap<u64, Vec<&Transition>> = BTreeMap::new();
        for tr in &self.transitions {
            out.entry(tr.traj_id).or_default().push(tr);
        }
        out
    }

    fn subset(&self, keep: impl Fn(&Transition) -> bool) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            transitions: self.transitions.iter().filter(|t| keep(t)).cloned().collect(),
        }
    }
}

fn check_transition(meta: &DatasetMeta, tr: &Transition, ctx: &str) -> Result<()> {
    if tr.s.dim() != meta.d_s {
        return Err(Error::dim(meta.d_s, tr.s.dim(), format!("{ctx}: s")));
    }
    if tr.s_next.dim() != meta.d_s {
        return Err(Error::dim(meta.d_s, tr.s_next.dim(), format!("{ctx}: s_next")));
    }
    if tr.a.dim() != meta.d_a {
        return Err(Error::dim(meta.d_a, tr.a.dim(), format!("{ctx}: a")));
    }
    Ok(())
}

fn write_dataset<W: Write>(d: &Dataset, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{}", serde_json::to_string(&d.meta).expect("meta serializes"))?;
    for tr in &d.transitions {
        writeln!(w, "{}", serde_json::to_string(tr).expect("transition serializes"))?;
    }
    Ok(())
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(d, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    format!("{:x}", Sha256::digest(bytes))
}

impl Dataset {
    /// SHA-256 of the dataset's on-disk form.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        write_dataset(self, &mut buf).expect("writing to memory");
        sha256_hex(&buf)
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut meta: Option<DatasetMeta> = None;
    let mut transitions = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match &meta {
            None => {
                let m: DatasetMeta = serde_json::from_str(&line)
                    .map_err(|e| parse_err(lineno, format!("bad meta line: {e}")))?;
                meta = Some(m);
            }
            Some(m) => {
                let tr: Transition = serde_json::from_str(&line)
                    .map_err(|e| parse_err(lineno, format!("bad transition: {e}")))?;
                check_transition(m, &tr, &format!("{}:{lineno}", path.display()))?;
                transitions.push(tr);
            }
        }
    }
    let meta = meta.ok_or_else(|| parse_err(1, "missing meta line".into()))?;
    Dataset::new(meta, transitions)
}

/// Splits by whole trajectories. The validation set takes
/// `round(val_fraction * n_traj)` trajectories, clamped to `[1, n_traj - 1]`,
/// chosen by a shuffle of the trajectory ids (in first-appearance order).
pub fn split(d: &Dataset, val_fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let mut ids = d.traj_ids();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "split needs at least 2 trajectories, dataset has {}",
            ids.len()
        )));
    }
    let n = ids.len();
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    rng.shuffle(&mut ids);
    let val_ids: std::collections::HashSet<u64> = ids[..n_val].iter().copied().collect();
    let train = d.subset(|t| !val_ids.contains(&t.traj_id));
    let val = d.subset(|t| val_ids.contains(&t.traj_id));
    Ok((train, val))
}

/// Mean L2 norm of `s_next - s`.
pub fn residual_scale(d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::InvalidArgument("residual_scale of empty dataset".into()));
    }
    let sum: f64 = d
        .transitions
        .iter()
        .map(|t| l2_dist(&t.s_next, &t.s))
        .sum();
    Ok(sum / d.len() as f64)
}

/// Returns `v + e` with `e ~ N(0, std^2 I)`. `std == 0` returns `v` and
/// draws nothing.
pub fn add_gaussian_noise<V: RealVec>(v: &V, std: f64, rng: &mut RngStream) -> Result<V> {
    if !(std >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise std must be >= 0, got {std}")));
    }
    let mut out = v.clone();
    if std > 0.0 {
        for x in out.values_mut() {
            *x += std * rng.normal();
        }
    }
    Ok(out)
}
