use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Dense layer `y = W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_out, fan_in)),
            b: Array1::zeros(fan_out),
        }
    }
}

/// ReLU on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

/// Squared-error loss `mean_i ||y_i - t_i||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    SquaredError,
}

/// Per-layer gradients, shaped like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.w.ncols(), l.w.nrows()))
                .collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.w *= c;
            l.b *= c;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    /// Seeded init: weights `N(0, 1) / sqrt(fan_in)`, zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut rng = RngStream::new(seed, "mlp/init");
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                layer.w.mapv_inplace(|_| rng.normal() * scale);
                layer
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::check_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            layers: widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    /// Builds a network from explicit layers, checking shapes chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        let mut widths = vec![layers[0].w.ncols()];
        for (i, l) in layers.iter().enumerate() {
            if l.w.ncols() != *widths.last().unwrap() {
                return Err(Error::dim(*widths.last().unwrap(), l.w.ncols(), format!("layer {i} input")));
            }
            if l.b.len() != l.w.nrows() {
                return Err(Error::dim(l.w.nrows(), l.b.len(), format!("layer {i} bias")));
            }
            widths.push(l.w.nrows());
        }
        Self::check_widths(&widths)?;
        Ok(Self { widths, layers })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "widths need input and output sizes, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero width in {widths:?}")));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), x.len(), "network input"));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.w.as_slice().expect("standard layout");
            let n_in = layer.w.ncols();
            let mut next: Vec<f64> = layer.b.to_vec();
            for (o, out) in next.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *out += row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>();
            }
            if i < last {
                for v in next.iter_mut() {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cur = next;
        }
        cur
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<MlpCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), x.ncols(), "network input"));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut cur = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = cur.dot(&layer.w.t());
            z += &layer.b;
            inputs.push(cur);
            if i < last {
                let a = z.mapv(|v| if v > 0.0 { v } else { 0.0 });
                pre.push(z);
                cur = a;
            } else {
                cur = z;
            }
        }
        Ok(MlpCache {
            inputs,
            pre,
            output: cur,
        })
    }

    /// Reverse-mode pass: given `dL/dy` for every row of the cached batch,
    /// returns parameter gradients and `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<f64>) -> (Gradients, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dy.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i < self.layers.len() - 1 {
                // ReLU subgradient is 0 at the kink
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[i])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0
                        }
                    });
            }
            let mut gw = delta.t().dot(&cache.inputs[i]);
            if !gw.is_standard_layout() {
                gw = gw.as_standard_layout().into_owned();
            }
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer { w: gw, b: gb });
            delta = delta.dot(&layer.w);
        }
        grads.reverse();
        (Gradients { layers: grads }, delta)
    }

    /// Exact input Jacobian (`out x in`) at `x`.
    pub fn grad_input(&self, x: &[f64]) -> Result<Array2<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), x.len(), "network input"));
        }
        let last = self.layers.len() - 1;
        let mut jac = Array2::<f64>::eye(self.input_dim());
        let mut cur = Array1::from(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.w.dot(&cur) + &layer.b;
            jac = layer.w.dot(&jac);
            if i < last {
                for (r, &zr) in z.iter().enumerate() {
                    if zr <= 0.0 {
                        jac.row_mut(r).fill(0.0);
                    }
                }
                cur = z.mapv(|v| v.max(0.0));
            } else {
                cur = z;
            }
        }
        Ok(jac)
    }

    /// Smallest |pre-activation| over hidden units at `x`; used to stay
    /// clear of ReLU kinks in finite-difference checks.
    pub fn min_abs_preactivation(&self, x: &[f64]) -> f64 {
        let last = self.layers.len() - 1;
        let mut cur = Array1::from(x.to_vec());
        let mut best = f64::INFINITY;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.w.dot(&cur) + &layer.b;
            if i < last {
                best = z.iter().fold(best, |m, v| m.min(v.abs()));
                cur = z.mapv(|v| v.max(0.0));
            }
        }
        best
    }
}

/// Mean loss over the batch and its exact parameter gradients.
pub fn grad_params(
    net: &Mlp,
    x: ArrayView2<f64>,
    target: ArrayView2<f64>,
    loss: Loss,
) -> Result<(f64, Gradients)> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if target.ncols() != net.output_dim() || target.nrows() != x.nrows() {
        return Err(Error::dim(net.output_dim(), target.ncols(), "loss target"));
    }
    let cache = net.forward_cached(x)?;
    let n = x.nrows() as f64;
    let diff = &cache.output - &target;
    let value = match loss {
        Loss::SquaredError => diff.iter().map(|d| d * d).sum::<f64>() / n,
    };
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    let dy = diff * (2.0 / n);
    let (grads, _) = net.backward(&cache, dy.view());
    Ok((value, grads))
}
