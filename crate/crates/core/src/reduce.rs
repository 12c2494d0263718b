//! Order selection, residual variance and prewhitening.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, TicaError};
use crate::linalg::sym_eigen_desc;
use crate::matrix::Matrix;

/// Eigenvalues below this fraction of the largest are treated as zero when
/// scoring model orders.
const POSITIVE_REL_TOL: f64 = 1e-12;

/// Prewhitened data for one scan.
#[derive(Debug, Clone)]
pub struct ReducedData {
    /// Q×V reduced data.
    pub y: Matrix,
    /// Q×T whitening operator.
    pub h: Matrix,
    /// Diagonal of the residual covariance factor, `1/(d_q − σ²)`.
    pub c_diag: DVector<f64>,
    pub sigma2: f64,
    pub order: usize,
    /// Full spectrum of the temporal covariance, non-increasing.
    pub eigenvalues: DVector<f64>,
    pub low_rank_warning: bool,
}

impl ReducedData {
    /// Maps reduced-space mixing columns back to the time domain
    /// (`hᵀ·C⁻¹`, the pseudo-inverse of `h`).
    pub fn back_projector(&self) -> Matrix {
        let mut out = self.h.transpose();
        for (mut col, c) in out.column_iter_mut().zip(self.c_diag.iter()) {
            col /= *c;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderChoice {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderEstimate {
    pub order: usize,
    /// Set when the evidence peaks at the smallest candidate or no
    /// candidate could be scored.
    pub low_rank_warning: bool,
    /// Log evidence per candidate order, starting at order 1.
    pub log_evidence: Vec<f64>,
}

/// Eigendecomposition of the temporal covariance `(1/V)·x·xᵀ`.
pub fn eigen_spectrum(x: &Matrix) -> Result<(DVector<f64>, Matrix)> {
    let (t, v) = x.shape();
    let xf = faer::MatRef::from_column_major_slice(x.as_slice(), t, v);
    let gram_f = xf * xf.transpose() * faer::Scale(1.0 / v as f64);
    let gram = Matrix::from_fn(t, t, |i, j| gram_f[(i, j)]);
    let (mut values, vectors) = sym_eigen_desc(&gram)?;
    // round-off can leave the null directions slightly negative
    values.iter_mut().for_each(|d| *d = d.max(0.0));
    Ok((values, vectors))
}

fn positive_prefix(eigenvalues: &[f64]) -> usize {
    let max = eigenvalues.first().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return 0;
    }
    eigenvalues
        .iter()
        .take_while(|&&d| d > POSITIVE_REL_TOL * max)
        .count()
}

/// Laplace-approximated log evidence of a probabilistic PCA model of rank
/// `k` for the (strictly positive) spectrum `spectrum` observed `n_obs`
/// times. Returns `-inf` when the Hessian term is undefined, which happens
/// when a retained eigenvalue ties with a later one.
pub fn log_evidence(spectrum: &[f64], k: usize, n_obs: usize) -> f64 {
    let d = spectrum.len();
    assert!(k < d, "rank {k} needs at least one discarded eigenvalue of {d}");
    let n = n_obs as f64;
    let df = d as f64;
    let kf = k as f64;
    let pi = std::f64::consts::PI;

    let mut pu = -kf * 2f64.ln();
    for i in 1..=k {
        let half = (df - i as f64 + 1.0) / 2.0;
        pu += ln_gamma(half) - pi.ln() * half;
    }
    let pl = -spectrum[..k].iter().map(|l| l.ln()).sum::<f64>() * n / 2.0;
    let tail = spectrum[k..].iter().sum::<f64>() / (d - k) as f64;
    let pv = -tail.ln() * n * (df - kf) / 2.0;
    let m = df * kf - kf * (kf + 1.0) / 2.0;
    let pp = (2.0 * pi).ln() * (m + kf) / 2.0;

    let fitted = |j: usize| if j < k { spectrum[j] } else { tail };
    let mut pa = 0.0;
    for i in 0..k {
        for j in (i + 1)..d {
            let term = (spectrum[i] - spectrum[j]) * (1.0 / fitted(j) - 1.0 / fitted(i));
            if !(term > 0.0) {
                return f64::NEG_INFINITY;
            }
            pa += term.ln() + n.ln();
        }
    }
    pu + pl + pv + pp - pa / 2.0 - kf * n.ln() / 2.0
}

fn ln_positive(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `log_evidence(spectrum, k, n_obs)` for every `k` in `0..=max_k`, in
/// O(d²) rather than O(d³): the Hessian sum splits into a per-row sum over
/// all later eigenvalues, a correction for retained pairs and a term that
/// depends on the row and the tail mean only.
pub fn log_evidence_profile(spectrum: &[f64], max_k: usize, n_obs: usize) -> Vec<f64> {
    let d = spectrum.len();
    assert!(max_k < d, "rank {max_k} needs at least one discarded eigenvalue of {d}");
    let n = n_obs as f64;
    let df = d as f64;
    let pi = std::f64::consts::PI;
    let logs: Vec<f64> = spectrum.iter().map(|&l| ln_positive(l)).collect();
    let mut suffix = vec![0.0; d + 1];
    for i in (0..d).rev() {
        suffix[i] = suffix[i + 1] + spectrum[i];
    }

    let mut out = Vec::with_capacity(max_k + 1);
    let (mut pu, mut sum_log) = (0.0, 0.0);
    let (mut row_sums, mut retained_diff, mut retained_log) = (0.0, 0.0, 0.0);
    for k in 0..=max_k {
        if k > 0 {
            let i = k - 1;
            let half = (df - i as f64) / 2.0;
            pu += ln_gamma(half) - pi.ln() * half;
            row_sums += spectrum[i + 1..].iter().map(|&l| ln_positive(spectrum[i] - l)).sum::<f64>();
            retained_diff += (0..i).map(|h| ln_positive(spectrum[h] - spectrum[i])).sum::<f64>();
            retained_log += sum_log + i as f64 * logs[i];
            sum_log += logs[i];
        }
        let kf = k as f64;
        let tail = suffix[k] / (df - kf);
        let tail_rows: f64 = (0..k)
            .map(|i| ln_positive((spectrum[i] - tail) / (spectrum[i] * tail)))
            .sum();
        let pairs = kf * df - kf * (kf + 1.0) / 2.0;
        let pa = row_sums + retained_diff - retained_log + (df - kf) * tail_rows + pairs * n.ln();
        if !pa.is_finite() || !sum_log.is_finite() {
            out.push(f64::NEG_INFINITY);
            continue;
        }
        let pl = -sum_log * n / 2.0;
        let pv = -tail.ln() * n * (df - kf) / 2.0;
        let m = df * kf - kf * (kf + 1.0) / 2.0;
        let pp = (2.0 * pi).ln() * (m + kf) / 2.0;
        out.push(pu - kf * 2f64.ln() + pl + pv + pp - pa / 2.0 - kf * n.ln() / 2.0);
    }
    out
}

/// Chooses the number of components by maximizing the Laplace evidence over
/// orders `1..=T−2` (restricted to the positive part of the spectrum).
pub fn estimate_order(eigenvalues: &[f64], n_obs: usize) -> Result<OrderEstimate> {
    let d = positive_prefix(eigenvalues);
    if d < 2 {
        return Err(TicaError::DegenerateInput(format!(
            "order selection needs at least 2 positive eigenvalues, found {d}"
        )));
    }
    let spectrum = &eigenvalues[..d];
    let max_k = (d - 1).min(eigenvalues.len().saturating_sub(2)).max(1);
    let log_evidence = log_evidence_profile(spectrum, max_k, n_obs)[1..].to_vec();
    let best = argmax_finite(&log_evidence);
    let (order, low_rank_warning) = match best {
        Some(i) => (i + 1, i == 0),
        None => (1, true),
    };
    if low_rank_warning {
        log::warn!("order selection peaked at the minimum candidate");
    }
    Ok(OrderEstimate {
        order,
        low_rank_warning,
        log_evidence,
    })
}

/// Number of structured components in a residual spectrum, allowing zero
/// and capped at `max`.
pub fn estimate_nuisance_count(eigenvalues: &[f64], n_obs: usize, max: usize) -> usize {
    let d = positive_prefix(eigenvalues);
    if d < 2 || max == 0 {
        return 0;
    }
    let spectrum = &eigenvalues[..d];
    let top = max.min(d - 1);
    let scores = log_evidence_profile(spectrum, top, n_obs);
    argmax_finite(&scores).unwrap_or(0)
}

fn argmax_finite(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Mean of the eigenvalues after position `q`.
pub fn residual_variance(eigenvalues: &[f64], q: usize) -> Result<f64> {
    let t = eigenvalues.len();
    if q >= t {
        return Err(TicaError::DegenerateInput(format!(
            "order {q} leaves no residual eigenvalues out of {t}"
        )));
    }
    Ok(eigenvalues[q..].iter().sum::<f64>() / (t - q) as f64)
}

pub fn prewhiten(x: &Matrix, order: OrderChoice) -> Result<ReducedData> {
    let (values, vectors) = eigen_spectrum(x)?;
    prewhiten_with_spectrum(x, values, &vectors, order)
}

/// Prewhitening given a precomputed spectrum of `x`.
pub fn prewhiten_with_spectrum(
    x: &Matrix,
    eigenvalues: DVector<f64>,
    eigenvectors: &Matrix,
    order: OrderChoice,
) -> Result<ReducedData> {
    let t = eigenvalues.len();
    let (q, low_rank_warning) = match order {
        OrderChoice::Fixed(q) => (q, false),
        OrderChoice::Auto => {
            let est = estimate_order(eigenvalues.as_slice(), x.ncols())?;
            (est.order, est.low_rank_warning)
        }
    };
    if q == 0 {
        return Err(TicaError::DegenerateInput("model order must be positive".into()));
    }
    let sigma2 = residual_variance(eigenvalues.as_slice(), q)?;
    if eigenvalues[q - 1] <= sigma2 {
        return Err(TicaError::DegenerateInput(format!(
            "eigenvalue {} at order {q} does not exceed residual variance {sigma2}",
            eigenvalues[q - 1]
        )));
    }
    let c_diag = DVector::from_fn(q, |i, _| 1.0 / (eigenvalues[i] - sigma2));
    let mut h = eigenvectors.columns(0, q).transpose();
    for (i, mut row) in h.row_iter_mut().enumerate() {
        row *= c_diag[i].sqrt();
    }
    debug_assert_eq!(h.ncols(), t);
    let y = &h * x;
    Ok(ReducedData {
        y,
        h,
        c_diag,
        sigma2,
        order: q,
        eigenvalues,
        low_rank_warning,
    })
}
