//! Root solving for `s + f̂(s, a) = s_target` and the residual-model
//! abstraction shared by learned and analytic dynamics.

use ndarray::{Array1, Array2};

use crate::data::{l2_dist, l2_norm};
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::pendulum::{Pendulum, ACTION_DIM, STATE_DIM};

/// Anything predicting a one-step residual `s' - s`.
pub trait ResidualModel {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn residual(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>>;
    /// `∂ residual / ∂ s`, shape `d_s x d_s`.
    fn state_jacobian(&self, s: &[f64], a: &[f64]) -> Result<Array2<f64>>;
}

impl ResidualModel for DynamicsModel {
    fn state_dim(&self) -> usize {
        self.d_s
    }

    fn action_dim(&self) -> usize {
        self.d_a
    }

    fn residual(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.predict(s, a)
    }

    fn state_jacobian(&self, s: &[f64], a: &[f64]) -> Result<Array2<f64>> {
        DynamicsModel::state_jacobian(self, s, a)
    }
}

/// The analytic pendulum as a residual model. Off-manifold inputs are
/// projected onto the unit circle before stepping.
impl ResidualModel for Pendulum {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn residual(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        if s.len() != STATE_DIM || a.len() != ACTION_DIM {
            return Err(Error::dim(STATE_DIM + ACTION_DIM, s.len() + a.len(), "pendulum residual input"));
        }
        Ok(self.true_residual_projected(s, a).into_vec())
    }

    fn state_jacobian(&self, s: &[f64], a: &[f64]) -> Result<Array2<f64>> {
        let h = 1e-6;
        let mut jac = Array2::zeros((STATE_DIM, STATE_DIM));
        for j in 0..STATE_DIM {
            let mut p = s.to_vec();
            let mut m = s.to_vec();
            p[j] += h;
            m[j] -= h;
            let (rp, rm) = (self.residual(&p, a)?, self.residual(&m, a)?);
            for i in 0..STATE_DIM {
                jac[[i, j]] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        Ok(jac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub gd_steps: usize,
    pub gd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 100, gd_steps: 200, gd_step: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RootSolution {
    pub s_g: Vec<f64>,
    /// `||s_g + f̂(s_g, a) - s_target||`
    pub residual: f64,
    /// Model evaluations spent, fixed-point and descent combined.
    pub iters: usize,
    pub converged: bool,
}

/// `||s + f̂(s, a) - target||`.
pub fn root_residual<M: ResidualModel + ?Sized>(model: &M, s: &[f64], a: &[f64], target: &[f64]) -> Result<f64> {
    let r = model.residual(s, a)?;
    let v: Vec<f64> = s.iter().zip(&r).zip(target).map(|((x, d), t)| x + d - t).collect();
    let n = l2_norm(&v);
    if !n.is_finite() {
        return Err(Error::NonFinite("root residual".into()));
    }
    Ok(n)
}

/// Finds `s_g` with `s_g + f̂(s_g, a) = s_target`: fixed-point iteration
/// `s ← s_target - f̂(s, a)` from `s_target`, then gradient descent on the
/// squared residual if that has not converged. Returns the best iterate
/// seen; failing to converge is reported, not raised.
pub fn solve_root<M: ResidualModel + ?Sized>(
    model: &M,
    a: &[f64],
    s_target: &[f64],
    cfg: &SolverConfig,
) -> Result<RootSolution> {
    if s_target.len() != model.state_dim() || a.len() != model.action_dim() {
        return Err(Error::dim(
            model.state_dim() + model.action_dim(),
            s_target.len() + a.len(),
            "root solve inputs",
        ));
    }
    let mut s = s_target.to_vec();
    let mut best = (s.clone(), f64::INFINITY);
    let mut iters = 0;
    for _ in 0..cfg.max_iters.max(1) {
        iters += 1;
        let r = model.residual(&s, a)?;
        let next: Vec<f64> = s_target.iter().zip(&r).map(|(t, d)| t - d).collect();
        // residual at the current iterate is ||s - next||
        let res = l2_dist(&s, &next);
        if !res.is_finite() {
            return Err(Error::NonFinite("root residual during fixed-point iteration".into()));
        }
        if res < best.1 {
            best = (s.clone(), res);
        }
        if res <= cfg.tol {
            return Ok(RootSolution { s_g: s, residual: res, iters, converged: true });
        }
        s = next;
    }
    let last = root_residual(model, &s, a, s_target)?;
    if last < best.1 {
        best = (s, last);
    }
    if best.1 <= cfg.tol {
        return Ok(RootSolution { s_g: best.0, residual: best.1, iters, converged: true });
    }
    let (mut s, mut obj) = (best.0.clone(), 0.5 * best.1 * best.1);
    for _ in 0..cfg.gd_steps {
        let r = model.residual(&s, a)?;
        let v = Array1::from_iter(s.iter().zip(&r).zip(s_target).map(|((x, d), t)| x + d - t));
        let mut jac = model.state_jacobian(&s, a)?;
        for i in 0..jac.nrows() {
            jac[[i, i]] += 1.0;
        }
        let g = jac.t().dot(&v);
        let mut step = cfg.gd_step;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = s.iter().zip(&g).map(|(x, gi)| x - step * gi).collect();
            iters += 1;
            let res = root_residual(model, &cand, a, s_target)?;
            if 0.5 * res * res < obj {
                s = cand;
                obj = 0.5 * res * res;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        let res = (2.0 * obj).sqrt();
        if res < best.1 {
            best = (s.clone(), res);
        }
        if res <= cfg.tol {
            break;
        }
    }
    let converged = best.1 <= cfg.tol;
    Ok(RootSolution { s_g: best.0, residual: best.1, iters, converged })
}

/// Golden-section minimization of `f` on `[lo, hi]`. Returns the best
/// point, its value and the number of evaluations.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64, usize) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut evals = 2;
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        evals += 1;
    }
    // the endpoints matter when the minimum sits on the boundary
    let (flo, fhi) = (f(lo), f(hi));
    evals += 2;
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    if flo < best.1 {
        best = (lo, flo);
    }
    if fhi < best.1 {
        best = (hi, fhi);
    }
    (best.0, best.1, evals)
}
