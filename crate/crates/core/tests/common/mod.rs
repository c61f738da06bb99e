//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use ccil_core::nn::{Mlp, MlpCache};
use ndarray::{Array1, Array2};

/// Largest singular value from a full SVD.
pub fn svd_norm(w: &Array2<f64>) -> f64 {
    let m = nalgebra::DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[[i, j]]);
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Half squared error of a single-sample forward pass.
fn half_sq(net: &Mlp, x: &[f64], t: &[f64]) -> f64 {
    let y = net.forward(x).unwrap();
    0.5 * y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn analytic(net: &Mlp, x: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    let cache: MlpCache = net.forward_cached(xb.view()).unwrap();
    let dy = &cache.output - &Array2::from_shape_vec((1, t.len()), t.to_vec()).unwrap();
    let (g, dx) = net.backward(&cache, dy.view());
    (g.tensors().concat(), dx.row(0).to_vec())
}

/// Relative errors (parameters, inputs) of backprop against central
/// differences of `½||net(x) - t||²`.
pub fn gradient_errors(net: &Mlp, x: &[f64], t: &[f64]) -> (f64, f64) {
    let h = 1e-6;
    let (gp, gx) = analytic(net, x, t);
    let mut fd_p = Vec::with_capacity(gp.len());
    for k in 0..net.param_count() {
        let shifted = |d: f64| {
            let mut n = net.clone();
            let mut seen = 0;
            for tensor in n.tensors_mut() {
                if k < seen + tensor.len() {
                    tensor[k - seen] += d;
                    break;
                }
                seen += tensor.len();
            }
            half_sq(&n, x, t)
        };
        fd_p.push((shifted(h) - shifted(-h)) / (2.0 * h));
    }
    let mut fd_x = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[j] += h;
        m[j] -= h;
        fd_x.push((half_sq(net, &p, t) - half_sq(net, &m, t)) / (2.0 * h));
    }
    (rel_err(&gp, &fd_p), rel_err(&gx, &fd_x))
}

/// Pendulum `(θ, θ̇)` advanced by forward Euler with step `h` over `dt`.
pub fn euler_oracle(theta: f64, theta_dot: f64, torque: f64, g_over_l: f64, dt: f64, h: f64) -> (f64, f64) {
    let n = (dt / h).round() as usize;
    let (mut th, mut w) = (theta, theta_dot);
    for _ in 0..n {
        let acc = -g_over_l * th.sin() + torque;
        th += h * w;
        w += h * acc;
    }
    (th, w)
}

/// Pendulum `(θ, θ̇)` advanced by RK4 with `n` substeps over `dt`.
pub fn fine_rk4_oracle(theta: f64, theta_dot: f64, torque: f64, g_over_l: f64, dt: f64, n: usize) -> (f64, f64) {
    let f = |th: f64, w: f64| (w, -g_over_l * th.sin() + torque);
    let h = dt / n as f64;
    let (mut th, mut w) = (theta, theta_dot);
    for _ in 0..n {
        let k1 = f(th, w);
        let k2 = f(th + 0.5 * h * k1.0, w + 0.5 * h * k1.1);
        let k3 = f(th + 0.5 * h * k2.0, w + 0.5 * h * k2.1);
        let k4 = f(th + h * k3.0, w + h * k3.1);
        th += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        w += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    (th, w)
}

/// Mechanical energy per unit inertia.
pub fn energy(theta: f64, theta_dot: f64, g_over_l: f64) -> f64 {
    0.5 * theta_dot * theta_dot - g_over_l * theta.cos()
}

/// Angular distance on the circle.
pub fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

pub fn unit(v: &Array1<f64>) -> Array1<f64> {
    v / v.dot(v).sqrt()
}

pub mod fixture {
    use ccil_core::data::{split, Dataset};
    use ccil_core::dynamics::{train_dynamics, DynamicsModel, RegConfig};
    use ccil_core::nn::TrainConfig;
    use ccil_core::pendulum::Pendulum;
    use ccil_core::rng::RngStream;

    pub struct Setup {
        pub env: Pendulum,
        pub demos: Dataset,
        pub train: Dataset,
        pub val: Dataset,
    }

    pub fn pendulum(n_traj: usize, horizon: usize, seed: u64) -> Setup {
        let env = Pendulum::by_name("pendulum").unwrap();
        let demos = env.gen_demos(n_traj, horizon, seed).unwrap();
        let (train, val) = split(&demos, 0.2, &mut RngStream::new(seed, "dynamics/split")).unwrap();
        Setup { env, demos, train, val }
    }

    pub fn fit(s: &Setup, reg: &RegConfig, epochs: usize) -> DynamicsModel {
        let tc = TrainConfig { epochs, patience: epochs, ..TrainConfig::default() };
        train_dynamics(&s.train, &s.val, reg, &tc).unwrap()
    }
}
