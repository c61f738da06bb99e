//! Sampled local-Lipschitz estimates and layer-product bounds.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{l2_dist, l2_norm, Transition};
use crate::error::{Error, Result};
use crate::nn::spectral_norm;
use crate::rng::RngStream;

use super::DynamicsModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    /// Largest difference quotient over the draws.
    pub max: f64,
    pub mean: f64,
}

/// Difference-quotient estimate of the local Lipschitz constant of `f` at
/// `x`: over `n` draws `Δ ~ N(0, σ² I)`, `||f(x + Δ) - f(x)|| / ||Δ||`.
/// A zero-norm draw is redrawn.
pub fn estimate_quotients<F>(f: F, x: &[f64], sigma: f64, n: usize, rng: &mut RngStream) -> Result<LipschitzEstimate>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(sigma > 0.0) || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "lipschitz estimate needs sigma > 0 and n >= 1, got {sigma}, {n}"
        )));
    }
    let base = f(x);
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    let mut xp = x.to_vec();
    for _ in 0..n {
        let dn = loop {
            for (p, v) in xp.iter_mut().zip(x) {
                *p = v + sigma * rng.normal();
            }
            let d: Vec<f64> = xp.iter().zip(x).map(|(p, v)| p - v).collect();
            let dn = l2_norm(&d);
            if dn > 0.0 {
                break dn;
            }
        };
        let q = l2_dist(&f(&xp), &base) / dn;
        max = max.max(q);
        sum += q;
    }
    Ok(LipschitzEstimate {
        max,
        mean: sum / n as f64,
    })
}

/// Estimate of the local Lipschitz constant of `f(·, a)` at `s` under state
/// perturbations.
pub fn estimate_local_lipschitz<F>(
    f: F,
    s: &[f64],
    a: &[f64],
    sigma: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<LipschitzEstimate>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    estimate_quotients(|sp| f(sp, a), s, sigma, n, rng)
}

/// Lipschitz summary stored with a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LipschitzReport {
    /// Spectral norm of every weight matrix (standardized space).
    pub layer_norms: Vec<f64>,
    /// Product of `layer_norms`.
    pub product_bound: f64,
    /// Raw-unit layer-product bound w.r.t. the state block.
    pub product_k_state: f64,
    /// Raw-unit layer-product bound w.r.t. the action block.
    pub product_k_action: f64,
    /// Standardized-space sampled estimate, max over anchors.
    pub sampled_max: f64,
    /// Standardized-space sampled estimate, mean of per-anchor means.
    pub sampled_mean: f64,
    /// Fraction of anchors whose standardized estimate is within the
    /// model's target `L`, when it has one.
    pub fraction_within_target: Option<f64>,
    /// Raw-unit sampled state constant, max over anchors.
    pub sampled_k_state: f64,
    /// Raw-unit sampled action constant, max over anchors.
    pub sampled_k_action: f64,
    pub n_anchors: usize,
    pub sigma: f64,
    pub n_draws: usize,
}

fn block_scaled(w: &Array2<f64>, cols: std::ops::Range<usize>, in_std: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((w.nrows(), cols.len()), |(i, j)| {
        w[[i, cols.start + j]] / in_std[cols.start + j]
    })
}

/// Raw-unit layer-product bounds `(K_state, K_action)`.
pub fn product_bounds(model: &DynamicsModel) -> (f64, f64) {
    let layers = model.net.layers();
    let out_std = &model.norm.out_std;
    let in_std = &model.norm.in_std;
    let (d_s, d_a) = (model.d_s, model.d_a);
    let last = layers.len() - 1;
    let scale_out = |w: &Array2<f64>| {
        Array2::from_shape_fn(w.raw_dim(), |(i, j)| out_std[i] * w[[i, j]])
    };
    let first = if last == 0 { scale_out(&layers[0].w) } else { layers[0].w.clone() };
    let mut rest = 1.0;
    for (i, l) in layers.iter().enumerate().skip(1) {
        rest *= if i == last { spectral_norm(scale_out(&l.w).view()) } else { spectral_norm(l.w.view()) };
    }
    let ks = spectral_norm(block_scaled(&first, 0..d_s, in_std).view()) * rest;
    let ka = spectral_norm(block_scaled(&first, d_s..d_s + d_a, in_std).view()) * rest;
    (ks, ka)
}

/// Evenly strided subset of at most `max` anchors.
pub(crate) fn stride_anchors(anchors: &[Transition], max: usize) -> Vec<&Transition> {
    if anchors.len() <= max || max == 0 {
        return anchors.iter().collect();
    }
    let step = anchors.len() as f64 / max as f64;
    (0..max).map(|k| &anchors[(k as f64 * step) as usize]).collect()
}

impl DynamicsModel {
    /// Standardized-space estimate at one anchor under state perturbations.
    pub fn standardized_estimate(&self, s: &[f64], a: &[f64], sigma: f64, n: usize, rng: &mut RngStream) -> Result<LipschitzEstimate> {
        self.check_dims(s, a)?;
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        let z = self.norm.encode(&x);
        let (zs, za) = z.split_at(self.d_s);
        estimate_quotients(
            |p| {
                let v: Vec<f64> = p.iter().chain(za).copied().collect();
                self.net.forward_unchecked(&v)
            },
            zs,
            sigma,
            n,
            rng,
        )
    }

    /// Raw-unit estimate under state perturbations.
    pub fn raw_state_estimate(&self, s: &[f64], a: &[f64], sigma: f64, n: usize, rng: &mut RngStream) -> Result<LipschitzEstimate> {
        self.check_dims(s, a)?;
        estimate_local_lipschitz(|sp, ap| self.predict_unchecked(sp, ap), s, a, sigma, n, rng)
    }

    /// Raw-unit estimate under action perturbations.
    pub fn raw_action_estimate(&self, s: &[f64], a: &[f64], sigma: f64, n: usize, rng: &mut RngStream) -> Result<LipschitzEstimate> {
        self.check_dims(s, a)?;
        estimate_quotients(|ap| self.predict_unchecked(s, ap), a, sigma, n, rng)
    }

    fn check_dims(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.d_s || a.len() != self.d_a {
            return Err(Error::dim(self.d_s + self.d_a, s.len() + a.len(), "dynamics input"));
        }
        Ok(())
    }

    /// Recomputes the Lipschitz report over (a strided subset of) `anchors`.
    pub fn compute_lipschitz_report(
        &self,
        anchors: &[Transition],
        sigma: f64,
        n_draws: usize,
        max_anchors: usize,
        seed: u64,
    ) -> Result<LipschitzReport> {
        let layer_norms: Vec<f64> = self.net.layers().iter().map(|l| spectral_norm(l.w.view())).collect();
        let product_bound = layer_norms.iter().product();
        let (product_k_state, product_k_action) = product_bounds(self);
        let mut rng = RngStream::new(seed, "lipschitz/report");
        let subset = stride_anchors(anchors, max_anchors);
        let target = self.reg.target_lipschitz();
        let (mut smax, mut ssum, mut within) = (0.0f64, 0.0, 0usize);
        let (mut ks, mut ka) = (0.0f64, 0.0f64);
        for tr in &subset {
            let est = self.standardized_estimate(&tr.s, &tr.a, sigma, n_draws, &mut rng)?;
            smax = smax.max(est.max);
            ssum += est.mean;
            if target.is_some_and(|l| est.max <= l) {
                within += 1;
            }
            ks = ks.max(self.raw_state_estimate(&tr.s, &tr.a, sigma, n_draws, &mut rng)?.max);
            ka = ka.max(self.raw_action_estimate(&tr.s, &tr.a, sigma, n_draws, &mut rng)?.max);
        }
        let n = subset.len();
        Ok(LipschitzReport {
            layer_norms,
            product_bound,
            product_k_state,
            product_k_action,
            sampled_max: smax,
            sampled_mean: if n > 0 { ssum / n as f64 } else { 0.0 },
            fraction_within_target: target.filter(|_| n > 0).map(|_| within as f64 / n as f64),
            sampled_k_state: ks,
            sampled_k_action: ka,
            n_anchors: n,
            sigma,
            n_draws,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Normalizer, RegConfig};
    use crate::nn::{Layer, Mlp};
    use ndarray::{array, Array1};

    fn linear_model(slope: f64) -> DynamicsModel {
        // f̂(s, a) = slope * s, ignoring a
        let w = array![[slope, 0.0, 0.0], [0.0, slope, 0.0]];
        let net = Mlp::from_layers(vec![Layer { w, b: Array1::zeros(2) }]).unwrap();
        DynamicsModel::from_parts(net, Normalizer::identity(3, 2), RegConfig::none(), 2, 1).unwrap()
    }

    #[test]
    fn linear_two_identity_estimates_two() {
        let m = linear_model(2.0);
        let mut rng = RngStream::new(0, "t");
        let e = m.raw_state_estimate(&[0.3, -0.2], &[1.0], 1e-3, 16, &mut rng).unwrap();
        assert!((e.max - 2.0).abs() < 1e-9 && (e.mean - 2.0).abs() < 1e-9);
    }

    #[test]
    fn constant_function_estimates_zero() {
        let mut rng = RngStream::new(0, "t");
        let e = estimate_local_lipschitz(|_, _| vec![1.0, 2.0], &[0.1, 0.2], &[0.0], 1e-4, 8, &mut rng).unwrap();
        assert_eq!(e.max, 0.0);
        assert!(estimate_local_lipschitz(|_, _| vec![0.0], &[0.1], &[0.0], 0.0, 8, &mut rng).is_err());
    }

    #[test]
    fn product_bounds_of_linear_model() {
        let m = linear_model(2.0);
        let (ks, ka) = product_bounds(&m);
        assert!((ks - 2.0).abs() < 1e-9);
        assert_eq!(ka, 0.0);
    }
}
