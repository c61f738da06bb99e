//! Dynamics-model training for every regularization mode.

use ndarray::{Array1, Array2, Axis};

use crate::data::{l2_norm, Dataset};
use crate::error::{Error, Result};
use crate::nn::{fit, Adam, Gradients, Mlp, Objective, PowerIteration, TrainConfig};
use crate::rng::RngStream;

use super::losses::sigmoid;
use super::model::{dyn_input, residual_target};
use super::{DynamicsModel, Normalizer, PenaltyForm, RegConfig, RegMode};

pub const HIDDEN: [usize; 2] = [64, 64];
/// Anchors used for the stored Lipschitz report.
const REPORT_ANCHORS: usize = 2000;
const REPORT_DRAWS: usize = 16;

/// Standardized training problem for one regularization mode.
pub struct DynamicsObjective {
    reg: RegConfig,
    x: Array2<f64>,
    y: Array2<f64>,
    d_s: usize,
    val_x: Option<Array2<f64>>,
    val_y: Option<Array2<f64>>,
    rng: RngStream,
    /// Per-point slack (slack mode) or log-weights (weighted mode).
    aux: Vec<f64>,
    aux_grad: Vec<f64>,
    aux_adam: Adam,
    power_vecs: Vec<Array1<f64>>,
    power: PowerIteration,
}

fn rows(data: &[Vec<f64>], dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((data.len(), dim), |(i, j)| data[i][j])
}

impl DynamicsObjective {
    pub fn new(train: &Dataset, val: Option<&Dataset>, norm: &Normalizer, reg: &RegConfig, seed: u64) -> Self {
        let d_in = train.d_s() + train.d_a();
        let enc = |d: &Dataset| {
            let xs: Vec<Vec<f64>> = d.transitions().iter().map(|t| norm.encode(&dyn_input(t))).collect();
            let ys: Vec<Vec<f64>> = d
                .transitions()
                .iter()
                .map(|t| norm.encode_target(&residual_target(t)))
                .collect();
            (rows(&xs, d_in), rows(&ys, d.d_s()))
        };
        let (x, y) = enc(train);
        let (val_x, val_y) = match val {
            Some(v) if !v.is_empty() => {
                let (a, b) = enc(v);
                (Some(a), Some(b))
            }
            _ => (None, None),
        };
        let n = x.nrows();
        let aux = match reg.mode {
            RegMode::Slack => vec![reg.lambda_bar; n],
            _ => vec![0.0; n],
        };
        Self {
            reg: reg.clone(),
            x,
            y,
            d_s: train.d_s(),
            val_x,
            val_y,
            rng: RngStream::new(seed, "dynamics/perturb"),
            aux,
            aux_grad: vec![0.0; n],
            aux_adam: Adam::default(),
            power_vecs: Vec::new(),
            power: PowerIteration::default(),
        }
    }

    /// Per-point slack or weight variables.
    pub fn aux(&self) -> &[f64] {
        &self.aux
    }

    fn uses_penalty(&self) -> bool {
        matches!(self.reg.mode, RegMode::Hinge | RegMode::Slack)
    }

    fn projects(&self) -> bool {
        matches!(self.reg.mode, RegMode::Spectral | RegMode::Weighted)
    }

    /// Loss and gradients on rows `idx` given explicit state perturbations
    /// (`idx.len() * n_perturb` rows of width `d_s`, draw-major).
    pub fn loss_and_grad_with(&mut self, net: &Mlp, idx: &[usize], deltas: &Array2<f64>) -> Result<(f64, Gradients)> {
        let b = idx.len();
        let bf = b as f64;
        let xb = self.x.select(Axis(0), idx);
        let yb = self.y.select(Axis(0), idx);
        let cache0 = net.forward_cached(xb.view())?;
        let diff = &cache0.output - &yb;
        let sq: Vec<f64> = diff.rows().into_iter().map(|r| r.dot(&r)).collect();
        let weights: Vec<f64> = match self.reg.mode {
            RegMode::Weighted => idx.iter().map(|&j| sigmoid(self.aux[j])).collect(),
            _ => vec![1.0; b],
        };
        let mut loss: f64 = sq.iter().zip(&weights).map(|(e, w)| e * w).sum::<f64>() / bf;
        let mut dy0 = diff;
        for (mut row, w) in dy0.rows_mut().into_iter().zip(&weights) {
            row *= 2.0 * w / bf;
        }
        for &j in idx {
            self.aux_grad[j] = 0.0;
        }
        if self.reg.mode == RegMode::Weighted {
            for (k, &j) in idx.iter().enumerate() {
                let s = weights[k];
                loss += s;
                self.aux_grad[j] = s * (1.0 - s) * (sq[k] / bf + 1.0);
            }
        }
        let mut grads = Gradients::zeros_like(net);
        if self.uses_penalty() {
            let l = self.reg.target_lipschitz().expect("validated");
            let n = self.reg.n_perturb;
            let coef: Vec<f64> = match self.reg.mode {
                RegMode::Slack => idx.iter().map(|&j| self.aux[j]).collect(),
                _ => vec![self.reg.lambda; b],
            };
            let mut lip = vec![0.0; b];
            for k in 0..n {
                let mut xp = xb.clone();
                let mut dnorm = vec![0.0; b];
                for i in 0..b {
                    let d = deltas.row(k * b + i);
                    for c in 0..self.d_s {
                        xp[[i, c]] += d[c];
                    }
                    dnorm[i] = l2_norm(d.as_slice().expect("contiguous"));
                }
                let cache1 = net.forward_cached(xp.view())?;
                let mut dy1 = Array2::<f64>::zeros(cache1.output.raw_dim());
                for i in 0..b {
                    let dv = &cache1.output.row(i) - &cache0.output.row(i);
                    let dn = dv.dot(&dv).sqrt();
                    let excess = dn / dnorm[i] - l;
                    if excess > 0.0 && dn > 0.0 {
                        lip[i] += excess / n as f64;
                        let scale = coef[i] / (bf * n as f64);
                        loss += scale
                            * match self.reg.penalty_form {
                                PenaltyForm::Hinge => excess,
                                PenaltyForm::Indicator => 1.0,
                            };
                        let g = &dv * (scale / (dn * dnorm[i]));
                        dy1.row_mut(i).assign(&g);
                        let mut r0 = dy0.row_mut(i);
                        r0 -= &g;
                    }
                }
                let (g1, _) = net.backward(&cache1, dy1.view());
                grads.add_assign(&g1);
            }
            if self.reg.mode == RegMode::Slack {
                let (beta, bar) = (self.reg.beta, self.reg.lambda_bar);
                for (k, &j) in idx.iter().enumerate() {
                    let d = self.aux[j] - bar;
                    // λ_j·Lip_j was already added with the penalty above
                    loss += super::l0_surrogate(d, beta) / bf;
                    let l0_grad = beta * d.signum() * (-beta * d.abs()).exp();
                    self.aux_grad[j] = (lip[k] + l0_grad) / bf;
                }
            }
        }
        let (g0, _) = net.backward(&cache0, dy0.view());
        grads.add_assign(&g0);
        Ok((loss, grads))
    }

    fn draw_deltas(&mut self, b: usize) -> Array2<f64> {
        let n = if self.uses_penalty() { self.reg.n_perturb } else { 0 };
        let sigma = self.reg.sigma;
        let mut out = Array2::zeros((n * b, self.d_s));
        for r in 0..n * b {
            loop {
                for c in 0..self.d_s {
                    out[[r, c]] = sigma * self.rng.normal();
                }
                if out.row(r).iter().any(|&v| v != 0.0) {
                    break;
                }
            }
        }
        out
    }

    /// Fraction of weights with `σ(λ_j) < 0.01` (weighted mode).
    pub fn degenerate_fraction(&self) -> f64 {
        if self.aux.is_empty() {
            return 0.0;
        }
        self.aux.iter().filter(|&&w| sigmoid(w) < 0.01).count() as f64 / self.aux.len() as f64
    }
}

impl Objective for DynamicsObjective {
    fn len(&self) -> usize {
        self.x.nrows()
    }

    fn batch_grad(&mut self, net: &Mlp, idx: &[usize]) -> Result<(f64, Gradients)> {
        let deltas = self.draw_deltas(idx.len());
        self.loss_and_grad_with(net, idx, &deltas)
    }

    fn after_step(&mut self, net: &mut Mlp, lr: f64) -> Result<()> {
        if self.projects() {
            let bound = self.reg.per_layer_bound.expect("validated");
            if self.power_vecs.len() != net.layers().len() {
                self.power_vecs = net.layers().iter().map(|l| Array1::zeros(l.w.ncols())).collect();
            }
            for (layer, v) in net.layers_mut().iter_mut().zip(&mut self.power_vecs) {
                crate::nn::project_in_place(&mut layer.w, bound, v, &self.power);
            }
        }
        if matches!(self.reg.mode, RegMode::Slack | RegMode::Weighted) {
            self.aux_adam.step(vec![&mut self.aux[..]], vec![&self.aux_grad[..]], lr)?;
            if self.reg.mode == RegMode::Slack {
                // slack weights multiply a penalty and stay non-negative
                self.aux.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(())
    }

    fn val_loss(&mut self, net: &Mlp) -> Result<Option<f64>> {
        let (Some(x), Some(y)) = (&self.val_x, &self.val_y) else {
            return Ok(None);
        };
        let out = net.forward_batch(x.view())?;
        let d = out - y;
        Ok(Some(d.iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64))
    }
}

/// Mean `||f̂(s, a) + s - s_next||` over `d`.
pub fn eval_eps(model: &DynamicsModel, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::InvalidArgument("eps over empty dataset".into()));
    }
    let mut sum = 0.0;
    for tr in d.transitions() {
        let pred = model.predict(&tr.s, &tr.a)?;
        let e: f64 = pred
            .iter()
            .zip(residual_target(tr))
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            .sqrt();
        sum += e;
    }
    Ok(sum / d.len() as f64)
}

/// Trains a residual model on `train`, early-stopping on `val`, and fills
/// in its validation error and Lipschitz report.
pub fn train_dynamics(train: &Dataset, val: &Dataset, reg: &RegConfig, tc: &TrainConfig) -> Result<DynamicsModel> {
    reg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("dynamics training needs non-empty train and val sets".into()));
    }
    if train.d_s() != val.d_s() || train.d_a() != val.d_a() {
        return Err(Error::dim(train.d_s() + train.d_a(), val.d_s() + val.d_a(), "train/val dimensions"));
    }
    let (d_s, d_a) = (train.d_s(), train.d_a());
    let norm = Normalizer::fit(train);
    let widths = [d_s + d_a, HIDDEN[0], HIDDEN[1], d_s];
    let mut net = Mlp::init(&widths, tc.seed)?;
    let mut obj = DynamicsObjective::new(train, Some(val), &norm, reg, tc.seed);
    if obj.projects() {
        obj.after_step(&mut net, 0.0)?;
    }
    let outcome = fit(net, &mut obj, tc)?;
    if reg.mode == RegMode::Weighted {
        let frac = obj.degenerate_fraction();
        if frac > 0.5 {
            log::warn!("weighted loss: {:.0}% of sample weights collapsed below 0.01", 100.0 * frac);
        }
    }
    let mut model = DynamicsModel::from_parts(outcome.net, norm, reg.clone(), d_s, d_a)?;
    model.eps_val = eval_eps(&model, val)?;
    model.lipschitz_report =
        model.compute_lipschitz_report(train.transitions(), reg.sigma, REPORT_DRAWS, REPORT_ANCHORS, tc.seed)?;
    log::info!(
        "dynamics {}: eps_val {:.3e} after {} epochs",
        reg.describe(),
        model.eps_val,
        outcome.epochs_run
    );
    Ok(model)
}
