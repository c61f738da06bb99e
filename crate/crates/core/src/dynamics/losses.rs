//! Loss terms evaluated on a model and a batch of transitions. Squared
//! errors are in raw units; Lipschitz quotients are taken in the model's
//! standardized input/output space, where the constraint is enforced.

use crate::data::Transition;
use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::model::residual_target;
use super::DynamicsModel;

fn sq_err(model: &DynamicsModel, tr: &Transition) -> Result<f64> {
    let pred = model.predict(&tr.s, &tr.a)?;
    Ok(pred
        .iter()
        .zip(residual_target(tr))
        .map(|(p, t)| (p - t) * (p - t))
        .sum())
}

fn non_empty(batch: &[Transition]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// `mean ||f̂(s, a) + s - s_next||²`.
pub fn mse_loss(model: &DynamicsModel, batch: &[Transition]) -> Result<f64> {
    non_empty(batch)?;
    let mut sum = 0.0;
    for tr in batch {
        sum += sq_err(model, tr)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Per-point violation `mean_k max(q_k - L, 0)` over `n` state draws.
fn violation(model: &DynamicsModel, tr: &Transition, l: f64, sigma: f64, n: usize, rng: &mut RngStream) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..n {
        let q = model.standardized_estimate(&tr.s, &tr.a, sigma, 1, rng)?.max;
        total += (q - l).max(0.0);
    }
    Ok(total / n as f64)
}

/// Mean over batch and draws of `max(q - L, 0)`.
pub fn hinge_penalty(
    model: &DynamicsModel,
    batch: &[Transition],
    l: f64,
    sigma: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    non_empty(batch)?;
    if !(l > 0.0) {
        return Err(Error::InvalidArgument(format!("hinge bound must be > 0, got {l}")));
    }
    let mut sum = 0.0;
    for tr in batch {
        sum += violation(model, tr, l, sigma, n, rng)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Differentiable stand-in for `1[x != 0]`: `1 - exp(-β|x|)`.
pub fn l0_surrogate(x: f64, beta: f64) -> f64 {
    1.0 - (-beta * x.abs()).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `mean_j [mse_j + λ_j · Lip_j + (1 - exp(-β|λ_j - λ̄|))]`.
#[allow(clippy::too_many_arguments)]
pub fn slack_loss(
    model: &DynamicsModel,
    slack: &[f64],
    batch: &[Transition],
    l: f64,
    sigma: f64,
    n: usize,
    beta: f64,
    lambda_bar: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    non_empty(batch)?;
    if slack.len() != batch.len() {
        return Err(Error::dim(batch.len(), slack.len(), "slack variables"));
    }
    let mut sum = 0.0;
    for (tr, &lam) in batch.iter().zip(slack) {
        let lip = violation(model, tr, l, sigma, n, rng)?;
        sum += sq_err(model, tr)? + lam * lip + l0_surrogate(lam - lambda_bar, beta);
    }
    Ok(sum / batch.len() as f64)
}

/// `mean_j σ(λ_j) · mse_j + Σ_j σ(λ_j)`.
pub fn weighted_loss(model: &DynamicsModel, weights: &[f64], batch: &[Transition]) -> Result<f64> {
    non_empty(batch)?;
    if weights.len() != batch.len() {
        return Err(Error::dim(batch.len(), weights.len(), "loss weights"));
    }
    let mut fit = 0.0;
    let mut mass = 0.0;
    for (tr, &w) in batch.iter().zip(weights) {
        let s = sigmoid(w);
        fit += s * sq_err(model, tr)?;
        mass += s;
    }
    Ok(fit / batch.len() as f64 + mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ActionVec, StateVec};
    use crate::dynamics::{Normalizer, RegConfig};
    use crate::nn::{Layer, Mlp};
    use ndarray::{array, Array1, Array2};

    fn linear_model(slope: f64) -> DynamicsModel {
        let w = array![[slope, 0.0, 0.0], [0.0, slope, 0.0]];
        let net = Mlp::from_layers(vec![Layer { w, b: Array1::zeros(2) }]).unwrap();
        DynamicsModel::from_parts(net, Normalizer::identity(3, 2), RegConfig::none(), 2, 1).unwrap()
    }

    fn zero_model() -> DynamicsModel {
        let net = Mlp::from_layers(vec![Layer { w: Array2::zeros((2, 3)), b: Array1::zeros(2) }]).unwrap();
        DynamicsModel::from_parts(net, Normalizer::identity(3, 2), RegConfig::none(), 2, 1).unwrap()
    }

    fn tr(s: [f64; 2], s_next: [f64; 2]) -> Transition {
        Transition {
            traj_id: 0,
            t: 0,
            s: StateVec::new(s.to_vec()).unwrap(),
            a: ActionVec::new(vec![0.2]).unwrap(),
            s_next: StateVec::new(s_next.to_vec()).unwrap(),
        }
    }

    #[test]
    fn mse_examples() {
        let m = linear_model(1.0);
        // f̂(s) = s, so s_next = 2s is predicted perfectly
        assert_eq!(mse_loss(&m, &[tr([0.5, -1.0], [1.0, -2.0])]).unwrap(), 0.0);
        // zero model: residual error = s_next - s = (3, 4)
        assert_eq!(mse_loss(&zero_model(), &[tr([1.0, 1.0], [4.0, 5.0])]).unwrap(), 25.0);
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let net = Mlp::init(&[3, 8, 2], 5).unwrap();
        let norm = Normalizer {
            in_mean: vec![0.1, -0.2, 0.3],
            in_std: vec![0.5, 2.0, 1.5],
            out_mean: vec![0.01, -0.02],
            out_std: vec![0.1, 0.3],
        };
        let m = DynamicsModel::from_parts(net.clone(), norm.clone(), RegConfig::none(), 2, 1).unwrap();
        let mut rng = RngStream::new(0, "batch");
        let batch: Vec<Transition> = (0..20)
            .map(|_| tr([rng.normal(), rng.normal()], [rng.normal(), rng.normal()]))
            .collect();
        // straight-line oracle: standardize, dense layers by hand, unstandardize
        let mut sum = 0.0;
        for t in &batch {
            let x = [t.s[0], t.s[1], t.a[0]];
            let z: Vec<f64> = (0..3).map(|k| (x[k] - norm.in_mean[k]) / norm.in_std[k]).collect();
            let l0 = &net.layers()[0];
            let h: Vec<f64> = (0..8)
                .map(|i| ((0..3).map(|j| l0.w[[i, j]] * z[j]).sum::<f64>() + l0.b[i]).max(0.0))
                .collect();
            let l1 = &net.layers()[1];
            for o in 0..2 {
                let y = (0..8).map(|j| l1.w[[o, j]] * h[j]).sum::<f64>() + l1.b[o];
                let pred = norm.out_mean[o] + norm.out_std[o] * y;
                let e = pred + t.s[o] - t.s_next[o];
                sum += e * e;
            }
        }
        let oracle = sum / batch.len() as f64;
        assert!((mse_loss(&m, &batch).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        let mut rng = RngStream::new(1, "h");
        let batch = [tr([0.1, 0.2], [0.0, 0.0]), tr([-0.3, 0.5], [0.0, 0.0])];
        assert_eq!(hinge_penalty(&linear_model(2.0), &batch, 3.0, 1e-3, 4, &mut rng).unwrap(), 0.0);
        let p = hinge_penalty(&linear_model(5.0), &batch, 3.0, 1e-3, 4, &mut rng).unwrap();
        assert!((p - 2.0).abs() < 1e-9);
    }

    #[test]
    fn slack_reduces_to_mse() {
        let m = linear_model(2.0);
        let batch = [tr([0.1, 0.2], [0.5, 0.1]), tr([-0.3, 0.5], [0.0, 0.7])];
        let mut rng = RngStream::new(2, "s");
        let s = slack_loss(&m, &[0.1, 0.1], &batch, 3.0, 1e-3, 2, 10.0, 0.1, &mut rng).unwrap();
        assert!((s - mse_loss(&m, &batch).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn l0_surrogate_shape() {
        assert_eq!(l0_surrogate(0.0, 10.0), 0.0);
        let mut prev = 0.0;
        for k in 1..50 {
            let v = l0_surrogate(k as f64 * 0.05, 10.0);
            assert!(v > prev);
            prev = v;
        }
        // large beta approaches the indicator
        assert!((l0_surrogate(0.01, 1e6) - 1.0).abs() < 1e-12);
        assert_eq!(l0_surrogate(0.0, 1e6), 0.0);
    }

    #[test]
    fn weighted_examples() {
        let m = linear_model(2.0);
        let batch = [tr([0.1, 0.2], [0.5, 0.1]), tr([-0.3, 0.5], [0.0, 0.7]), tr([1.0, 0.0], [0.0, 0.0])];
        let mse = mse_loss(&m, &batch).unwrap();
        let w = weighted_loss(&m, &[0.0; 3], &batch).unwrap();
        assert!((w - (0.5 * mse + 1.5)).abs() < 1e-12);
        let w = weighted_loss(&m, &[-800.0; 3], &batch).unwrap();
        assert!(w.abs() < 1e-300);
    }
}
