//! Spectral norm by power iteration and the projection
//! `W -> W / max(||W||_2 / bound, 1)`.

use ndarray::{Array1, Array2, ArrayView2};

/// Power-iteration settings. Iteration stops when the relative change of
/// the estimate drops below `rel_tol` or after `max_iters` rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-12,
        }
    }
}

/// Deterministic, non-degenerate start vector.
fn start_vector(n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |i| 1.0 + 0.5 * (1.0 + 2.399_963 * i as f64).sin())
}

impl PowerIteration {
    /// Largest singular value of `w`. `v` holds the right singular vector
    /// estimate and is updated in place, so passing the previous result
    /// warm-starts the iteration.
    pub fn run(&self, w: ArrayView2<f64>, v: &mut Array1<f64>) -> f64 {
        if v.len() != w.ncols() || v.iter().all(|&x| x == 0.0) {
            *v = start_vector(w.ncols());
        }
        let norm = v.dot(v).sqrt();
        v.mapv_inplace(|x| x / norm);
        let mut sigma = 0.0;
        for _ in 0..self.max_iters {
            let u = w.dot(v);
            let next = u.dot(&u).sqrt();
            if next == 0.0 {
                return 0.0;
            }
            let wt_u = w.t().dot(&u);
            let n = wt_u.dot(&wt_u).sqrt();
            if n == 0.0 {
                return next;
            }
            *v = wt_u / n;
            let done = (next - sigma).abs() <= self.rel_tol * next;
            sigma = next;
            if done {
                break;
            }
        }
        // Rayleigh value at the final vector
        let u = w.dot(v);
        u.dot(&u).sqrt().max(sigma)
    }
}

pub fn spectral_norm(w: ArrayView2<f64>) -> f64 {
    let mut v = start_vector(w.ncols());
    PowerIteration::default().run(w, &mut v)
}

/// `w / max(||w||_2 / bound, 1)`.
pub fn spectral_project(w: &Array2<f64>, bound: f64) -> Array2<f64> {
    assert!(bound > 0.0, "spectral bound must be positive");
    let sigma = spectral_norm(w.view());
    let scale = (sigma / bound).max(1.0);
    if scale > 1.0 {
        w / scale
    } else {
        w.clone()
    }
}

/// In-place projection with a warm-started singular vector.
pub(crate) fn project_in_place(
    w: &mut Array2<f64>,
    bound: f64,
    v: &mut Array1<f64>,
    pi: &PowerIteration,
) -> f64 {
    let sigma = pi.run(w.view(), v);
    let scale = (sigma / bound).max(1.0);
    if scale > 1.0 {
        w.mapv_inplace(|x| x / scale);
    }
    sigma / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_norm() {
        let w = array![[4.0, 0.0], [0.0, -1.0]];
        assert!((spectral_norm(w.view()) - 4.0).abs() < 1e-12);
        let p = spectral_project(&w, 2.0);
        assert!((&p - &(&w / 2.0)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn no_op_below_bound() {
        let w = array![[1.0, 0.0], [0.0, 0.5]];
        assert_eq!(spectral_project(&w, 2.0), w);
    }

    #[test]
    fn orthogonal_start_still_converges() {
        // top right-singular vector (1, -1)/sqrt(2)
        let w = array![[3.0, -3.0], [1.0, 1.0]];
        assert!((spectral_norm(w.view()) - 18f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn zero_matrix() {
        let w = Array2::<f64>::zeros((3, 4));
        assert_eq!(spectral_norm(w.view()), 0.0);
        assert_eq!(spectral_project(&w, 1.0), w);
    }
}
