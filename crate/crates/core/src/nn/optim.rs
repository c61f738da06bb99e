use crate::error::{Error, Result};

use super::{Gradients, Mlp};

/// Adam over a list of flat parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(params.len(), grads.len(), "adam tensor count"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::dim(self.m.len(), params.len(), "adam state tensors"));
        }
        for (k, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[k].len() {
                return Err(Error::dim(self.m[k].len(), g.len(), format!("adam tensor {k}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) -> Result<()> {
        self.step(net.tensors_mut(), grads.tensors(), lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_trace_matches_hand_computation() {
        // hand trace of the Adam update with b1 = 0.9, b2 = 0.999, eps = 1e-8
        let grads = [1.0, -2.0, 0.5];
        let lr = 0.1;
        let mut p = [1.0];
        let mut adam = Adam::default();
        let (mut m, mut v, mut expect) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in grads.iter().enumerate() {
            adam.step(vec![&mut p[..]], vec![&[*g][..]], lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            expect -= lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        // first step moves by lr * g/|g| up to eps
        assert!((p[0] - expect).abs() < 1e-12);
        let mut q = [1.0];
        Adam::default().step(vec![&mut q[..]], vec![&[1.0][..]], 0.1).unwrap();
        assert!((q[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut adam = Adam::default();
        let mut p = [0.3, -0.7];
        adam.step(vec![&mut p[..]], vec![&[0.0, 0.0][..]], 0.01).unwrap();
        assert_eq!(p, [0.3, -0.7]);

        let mut adam = Adam::default();
        let mut p = [0.0];
        adam.step(vec![&mut p[..]], vec![&[1.0][..]], 0.01).unwrap();
        let m1 = adam.first_moments()[0][0];
        let v1 = adam.second_moments()[0][0];
        adam.step(vec![&mut p[..]], vec![&[0.0][..]], 0.01).unwrap();
        assert!((adam.first_moments()[0][0] - 0.9 * m1).abs() < 1e-15);
        assert!((adam.second_moments()[0][0] - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_identical_params() {
        let run = || {
            let mut adam = Adam::default();
            let mut p = vec![0.1, 0.2, 0.3];
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * k as f64 - 0.05).collect();
                adam.step(vec![&mut p[..]], vec![&g[..]], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut adam = Adam::default();
        let mut p = [0.0, 1.0];
        assert!(adam.step(vec![&mut p[..]], vec![&[1.0][..]], 0.1).is_err());
    }
}
