//! Allocation-free Cholesky routines for the small symmetric positive
//! definite systems solved once per location and latent configuration.

use crate::error::{Result, TicaError};

/// Reusable workspace for a `k×k` SPD matrix stored row-major.
#[derive(Debug, Clone)]
pub(crate) struct SpdWork {
    k: usize,
    factor: Vec<f64>,
    inverse: Vec<f64>,
    scratch: Vec<f64>,
}

impl SpdWork {
    pub fn new(k: usize) -> Self {
        SpdWork {
            k,
            factor: vec![0.0; k * k],
            inverse: vec![0.0; k * k],
            scratch: vec![0.0; k],
        }
    }

    fn try_factor(&mut self, p: &[f64], jitter: f64) -> bool {
        let k = self.k;
        let l = &mut self.factor;
        for i in 0..k {
            for j in 0..=i {
                let mut sum = p[i * k + j];
                if i == j {
                    sum += jitter;
                }
                for t in 0..j {
                    sum -= l[i * k + t] * l[j * k + t];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return false;
                    }
                    l[i * k + i] = sum.sqrt();
                } else {
                    l[i * k + j] = sum / l[j * k + j];
                }
            }
        }
        true
    }

    /// Factors `p` and returns `log|p|`. Retries once with diagonal jitter
    /// `1e-10·trace/k`.
    pub fn factor(&mut self, p: &[f64]) -> Result<f64> {
        let k = self.k;
        if !self.try_factor(p, 0.0) {
            let trace: f64 = (0..k).map(|i| p[i * k + i]).sum();
            let jitter = 1e-10 * trace.abs().max(f64::MIN_POSITIVE) / k as f64;
            if !self.try_factor(p, jitter) {
                return Err(TicaError::Numerical(
                    "posterior precision is not positive definite".into(),
                ));
            }
        }
        Ok(2.0 * (0..k).map(|i| self.factor[i * k + i].ln()).sum::<f64>())
    }

    /// Solves `p·x = b` with the current factor.
    pub fn solve(&mut self, b: &[f64], x: &mut [f64]) {
        let k = self.k;
        let l = &self.factor;
        let z = &mut self.scratch;
        for i in 0..k {
            let mut sum = b[i];
            for t in 0..i {
                sum -= l[i * k + t] * z[t];
            }
            z[i] = sum / l[i * k + i];
        }
        for i in (0..k).rev() {
            let mut sum = z[i];
            for t in (i + 1)..k {
                sum -= l[t * k + i] * x[t];
            }
            x[i] = sum / l[i * k + i];
        }
    }

    /// Inverse of the factored matrix, row-major.
    pub fn inverse(&mut self) -> &[f64] {
        let k = self.k;
        let mut e = vec![0.0; k];
        let mut col = vec![0.0; k];
        for j in 0..k {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.solve(&e, &mut col);
            for i in 0..k {
                self.inverse[i * k + j] = col[i];
            }
        }
        // symmetrize away round-off
        for i in 0..k {
            for j in (i + 1)..k {
                let avg = 0.5 * (self.inverse[i * k + j] + self.inverse[j * k + i]);
                self.inverse[i * k + j] = avg;
                self.inverse[j * k + i] = avg;
            }
        }
        &self.inverse
    }
}
