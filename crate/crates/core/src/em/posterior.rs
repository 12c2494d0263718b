//! Posterior computations for the reduced model with mixture nuisance
//! priors. For a configuration `z` the sources have a Gaussian prior with
//! precision `Λ_z` and mean `m_z`; the posterior precision is
//! `P_z = AᵀC⁻¹A/ν₀² + Λ_z` and the evidence follows from the same factor.

use nalgebra::DVector;
use rayon::prelude::*;

use super::model::{PreparedTemplate, TemplateSlice, ThetaState};
use super::mstep::SuffStats;
use super::small::SpdWork;
use super::space::LatentSpace;
use crate::error::{Result, TicaError};
use crate::matrix::Matrix;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Locations per parallel work item. Partial sums are reduced in chunk
/// order so results do not depend on the thread count.
const CHUNK: usize = 128;

/// Posterior summary at one location.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    /// `E[s | y]`, length `L + Q′`.
    pub mean: DVector<f64>,
    /// `E[s sᵀ | y]`.
    pub second: Matrix,
    /// `P(z_q = m | y)`, Q′×M.
    pub z_prob: Matrix,
    /// `P(z_q = m | y) · E[s_q | z_q = m, y]`.
    pub z_first: Matrix,
    /// `P(z_q = m | y) · E[s_q² | z_q = m, y]`.
    pub z_second: Matrix,
    /// `log p(y)` at this location.
    pub log_evidence: f64,
    pub n_configs: usize,
}

impl PosteriorMoments {
    pub fn covariance(&self) -> Matrix {
        &self.second - &self.mean * self.mean.transpose()
    }
}

/// θ-dependent quantities shared by every location.
pub(crate) struct Kernel {
    q: usize,
    l: usize,
    k: usize,
    m: usize,
    /// `AᵀC⁻¹/ν₀²`, K×Q row-major.
    at_cinv: Vec<f64>,
    /// `AᵀC⁻¹A/ν₀²`, K×K row-major.
    gram: Vec<f64>,
    /// `1/(ν₀² c_q)`.
    noise_prec: Vec<f64>,
    /// `Q·log 2π + Σ log(ν₀² c_q)`.
    log_const: f64,
    mog_prec: Vec<f64>,
    mog_mean: Vec<f64>,
    log_weight: Vec<f64>,
}

impl Kernel {
    pub fn new(theta: &ThetaState, c_diag: &[f64]) -> Result<Self> {
        let q = theta.q();
        if c_diag.len() != q {
            return Err(TicaError::DimensionMismatch(format!(
                "{} residual scales for {q} reduced dimensions",
                c_diag.len()
            )));
        }
        if theta.a2.nrows() != q || theta.mog.len() != theta.q_prime() {
            return Err(TicaError::DimensionMismatch(
                "nuisance mixing and mixtures disagree".into(),
            ));
        }
        if !(theta.nu0_sq > 0.0) || !theta.nu0_sq.is_finite() {
            return Err(TicaError::Numerical(format!("noise scale {}", theta.nu0_sq)));
        }
        let a = theta.mixing();
        let (l, qp) = (theta.l(), theta.q_prime());
        let k = l + qp;
        let m = theta.mog.first().map_or(0, |p| p.m());
        if theta.mog.iter().any(|p| p.m() != m) {
            return Err(TicaError::DimensionMismatch("mixtures differ in size".into()));
        }
        let noise_prec: Vec<f64> = c_diag.iter().map(|c| 1.0 / (theta.nu0_sq * c)).collect();
        let mut at_cinv = vec![0.0; k * q];
        for r in 0..k {
            for i in 0..q {
                at_cinv[r * q + i] = a[(i, r)] * noise_prec[i];
            }
        }
        let mut gram = vec![0.0; k * k];
        for r in 0..k {
            for c in 0..k {
                gram[r * k + c] = (0..q).map(|i| at_cinv[r * q + i] * a[(i, c)]).sum();
            }
        }
        let log_const = q as f64 * LN_2PI + c_diag.iter().map(|c| (theta.nu0_sq * c).ln()).sum::<f64>();
        let mut mog_prec = Vec::with_capacity(qp * m);
        let mut mog_mean = Vec::with_capacity(qp * m);
        let mut log_weight = Vec::with_capacity(qp * m);
        for p in &theta.mog {
            for c in 0..m {
                mog_prec.push(1.0 / p.vars[c]);
                mog_mean.push(p.means[c]);
                log_weight.push(p.weights[c].ln());
            }
        }
        Ok(Kernel {
            q,
            l,
            k,
            m,
            at_cinv,
            gram,
            noise_prec,
            log_const,
            mog_prec,
            mog_mean,
            log_weight,
        })
    }

    /// Visits every configuration at one location, passing its index, log
    /// joint weight `log π_z + log p(y | z)`, conditional mean and covariance.
    fn visit(
        &self,
        y: &[f64],
        slice: TemplateSlice<'_>,
        space: &LatentSpace,
        buf: &mut Buffers,
        mut f: impl FnMut(usize, f64, &[f64], &[f64]),
    ) -> Result<()> {
        let (q, l, k) = (self.q, self.l, self.k);
        if y.len() != q || slice.mean.len() != l || slice.var.len() != l {
            return Err(TicaError::DimensionMismatch(format!(
                "location data has {} entries and {} template values for Q = {q}, L = {l}",
                y.len(),
                slice.mean.len()
            )));
        }
        if space.q_prime != k - l || (space.q_prime > 0 && space.m != self.m) {
            return Err(TicaError::DimensionMismatch(
                "latent space does not match the nuisance mixtures".into(),
            ));
        }
        let mut y_quad = 0.0;
        for i in 0..q {
            y_quad += y[i] * y[i] * self.noise_prec[i];
        }
        for r in 0..k {
            buf.r[r] = (0..q).map(|i| self.at_cinv[r * q + i] * y[i]).sum();
        }
        let mut base_log_prec = 0.0;
        let mut base_quad = 0.0;
        for j in 0..l {
            let prec = 1.0 / slice.var[j];
            buf.prec[j] = prec;
            buf.prior_mean[j] = slice.mean[j];
            base_log_prec += prec.ln();
            base_quad += prec * slice.mean[j] * slice.mean[j];
        }
        for (idx, z) in space.iter().enumerate() {
            let mut log_prec = base_log_prec;
            let mut quad = base_quad;
            let mut log_pi = 0.0;
            for (j, &label) in z.iter().enumerate() {
                let t = j * self.m + label as usize;
                let prec = self.mog_prec[t];
                buf.prec[l + j] = prec;
                buf.prior_mean[l + j] = self.mog_mean[t];
                log_prec += prec.ln();
                quad += prec * self.mog_mean[t] * self.mog_mean[t];
                log_pi += self.log_weight[t];
            }
            buf.p.copy_from_slice(&self.gram);
            for r in 0..k {
                buf.p[r * k + r] += buf.prec[r];
                buf.b[r] = buf.r[r] + buf.prec[r] * buf.prior_mean[r];
            }
            let log_det = buf.work.factor(&buf.p)?;
            buf.work.solve(&buf.b, &mut buf.mu);
            let b_mu: f64 = buf.b.iter().zip(&buf.mu).map(|(b, m)| b * m).sum();
            let log_lik = -0.5 * (self.log_const + y_quad - log_prec + log_det + quad - b_mu);
            let cov = buf.work.inverse();
            f(idx, log_pi + log_lik, &buf.mu, cov);
        }
        Ok(())
    }

    /// Posterior summary at one location with streaming log-sum-exp
    /// accumulation over configurations.
    fn moments(
        &self,
        y: &[f64],
        slice: TemplateSlice<'_>,
        space: &LatentSpace,
        buf: &mut Buffers,
    ) -> Result<PosteriorMoments> {
        let (l, k, m) = (self.l, self.k, self.m);
        let qp = k - l;
        let mut acc = Accumulator::new(k, qp, m);
        let mut scale = f64::NEG_INFINITY;
        let mut total = 0.0;
        self.visit(y, slice, space, buf, |idx, lw, mu, cov| {
            if lw > scale {
                let shrink = (scale - lw).exp();
                acc.scale(shrink);
                total *= shrink;
                scale = lw;
            }
            let w = (lw - scale).exp();
            total += w;
            for r in 0..k {
                acc.mean[r] += w * mu[r];
                for c in 0..k {
                    acc.second[(r, c)] += w * (cov[r * k + c] + mu[r] * mu[c]);
                }
            }
            let z = space.config(idx);
            for j in 0..qp {
                let label = z[j] as usize;
                let s = l + j;
                acc.z_prob[(j, label)] += w;
                acc.z_first[(j, label)] += w * mu[s];
                acc.z_second[(j, label)] += w * (cov[s * k + s] + mu[s] * mu[s]);
            }
        })?;
        if !(total > 0.0) || !scale.is_finite() {
            return Err(TicaError::Numerical("posterior weights underflowed".into()));
        }
        acc.scale(1.0 / total);
        Ok(PosteriorMoments {
            mean: acc.mean,
            second: acc.second,
            z_prob: acc.z_prob,
            z_first: acc.z_first,
            z_second: acc.z_second,
            log_evidence: scale + total.ln(),
            n_configs: space.len(),
        })
    }
}

struct Accumulator {
    mean: DVector<f64>,
    second: Matrix,
    z_prob: Matrix,
    z_first: Matrix,
    z_second: Matrix,
}

impl Accumulator {
    fn new(k: usize, qp: usize, m: usize) -> Self {
        Accumulator {
            mean: DVector::zeros(k),
            second: Matrix::zeros(k, k),
            z_prob: Matrix::zeros(qp, m),
            z_first: Matrix::zeros(qp, m),
            z_second: Matrix::zeros(qp, m),
        }
    }

    fn scale(&mut self, factor: f64) {
        self.mean *= factor;
        self.second *= factor;
        self.z_prob *= factor;
        self.z_first *= factor;
        self.z_second *= factor;
    }
}

pub(crate) struct Buffers {
    work: SpdWork,
    p: Vec<f64>,
    b: Vec<f64>,
    r: Vec<f64>,
    mu: Vec<f64>,
    prec: Vec<f64>,
    prior_mean: Vec<f64>,
}

impl Buffers {
    fn new(k: usize) -> Self {
        Buffers {
            work: SpdWork::new(k),
            p: vec![0.0; k * k],
            b: vec![0.0; k],
            r: vec![0.0; k],
            mu: vec![0.0; k],
            prec: vec![0.0; k],
            prior_mean: vec![0.0; k],
        }
    }
}

/// Posterior mean and covariance of all sources given one configuration.
pub fn cond_posterior_s(
    y: &[f64],
    c_diag: &[f64],
    theta: &ThetaState,
    slice: TemplateSlice<'_>,
    z: &[u8],
) -> Result<(DVector<f64>, Matrix)> {
    let kernel = Kernel::new(theta, c_diag)?;
    let m = kernel.m.max(1);
    if z.len() != theta.q_prime() || z.iter().any(|&label| label as usize >= m) {
        return Err(TicaError::DimensionMismatch(format!("configuration {z:?} is invalid")));
    }
    let space = super::space::single(z, m);
    let mut buf = Buffers::new(kernel.k);
    let mut out = None;
    kernel.visit(y, slice, &space, &mut buf, |_, _, mu, cov| {
        let k = mu.len();
        out = Some((
            DVector::from_column_slice(mu),
            Matrix::from_row_slice(k, k, cov),
        ));
    })?;
    Ok(out.expect("one configuration visited"))
}

/// Posterior probabilities of every configuration in `space`.
pub fn posterior_z(
    y: &[f64],
    c_diag: &[f64],
    theta: &ThetaState,
    slice: TemplateSlice<'_>,
    space: &LatentSpace,
) -> Result<Vec<f64>> {
    let kernel = Kernel::new(theta, c_diag)?;
    let mut buf = Buffers::new(kernel.k);
    let mut log_w = Vec::with_capacity(space.len());
    kernel.visit(y, slice, space, &mut buf, |_, lw, _, _| log_w.push(lw))?;
    let norm = crate::linalg::logsumexp(&log_w);
    Ok(log_w.iter().map(|lw| (lw - norm).exp()).collect())
}

/// Posterior moments at one location.
pub fn posterior_moments(
    y: &[f64],
    c_diag: &[f64],
    theta: &ThetaState,
    slice: TemplateSlice<'_>,
    space: &LatentSpace,
) -> Result<PosteriorMoments> {
    let kernel = Kernel::new(theta, c_diag)?;
    let mut buf = Buffers::new(kernel.k);
    kernel.moments(y, slice, space, &mut buf)
}

/// Output of one E-step over all locations.
#[derive(Debug, Clone)]
pub struct EStepOutput {
    pub stats: SuffStats,
    /// K×V posterior means.
    pub mean: Matrix,
    /// L×V posterior variances of the template sources.
    pub template_var: Matrix,
    /// Observed-data log-likelihood at the θ used.
    pub loglik: f64,
}

/// E-step over every column of `y`. Locations are processed in fixed chunks
/// in parallel and combined in order.
pub fn e_step(
    y: &Matrix,
    c_diag: &[f64],
    theta: &ThetaState,
    prior: &PreparedTemplate,
    space: &LatentSpace,
) -> Result<EStepOutput> {
    let kernel = Kernel::new(theta, c_diag)?;
    let (q, v) = y.shape();
    if prior.v() != v || prior.l() != theta.l() {
        return Err(TicaError::DimensionMismatch(format!(
            "template is {}x{}, data has {v} locations and L = {}",
            prior.l(),
            prior.v(),
            theta.l()
        )));
    }
    let (l, k) = (kernel.l, kernel.k);
    let qp = k - l;
    let m = kernel.m;
    let starts: Vec<usize> = (0..v).step_by(CHUNK).collect();
    let parts: Vec<Result<(SuffStats, Vec<PosteriorMoments>, f64)>> = starts
        .into_par_iter()
        .map(|start| {
            let end = (start + CHUNK).min(v);
            let mut buf = Buffers::new(k);
            let mut stats = SuffStats::zeros(q, k, qp, m);
            let mut moments = Vec::with_capacity(end - start);
            let mut loglik = 0.0;
            for col in start..end {
                let yv = y.column(col);
                let yv = yv.as_slice();
                let slice = TemplateSlice {
                    mean: &prior.mean.as_slice()[col * l..(col + 1) * l],
                    var: &prior.var.as_slice()[col * l..(col + 1) * l],
                };
                let pm = kernel.moments(yv, slice, space, &mut buf).map_err(|e| match e {
                    TicaError::Numerical(msg) => TicaError::Numerical(format!("location {col}: {msg}")),
                    other => other,
                })?;
                stats.n_locations += 1;
                for i in 0..q {
                    stats.y_cinv_y += yv[i] * yv[i] / c_diag[i];
                    for r in 0..k {
                        stats.s_ys[(i, r)] += yv[i] * pm.mean[r];
                    }
                }
                stats.s_ss += &pm.second;
                stats.z_prob += &pm.z_prob;
                stats.z_first += &pm.z_first;
                stats.z_second += &pm.z_second;
                loglik += pm.log_evidence;
                moments.push(pm);
            }
            Ok((stats, moments, loglik))
        })
        .collect();
    let mut stats = SuffStats::zeros(q, k, qp, m);
    let mut mean = Matrix::zeros(k, v);
    let mut template_var = Matrix::zeros(l, v);
    let mut loglik = 0.0;
    let mut col = 0;
    for part in parts {
        let (s, moments, ll) = part?;
        stats.merge(&s);
        loglik += ll;
        for pm in moments {
            mean.set_column(col, &pm.mean);
            for j in 0..l {
                template_var[(j, col)] = (pm.second[(j, j)] - pm.mean[j] * pm.mean[j]).max(0.0);
            }
            col += 1;
        }
    }
    Ok(EStepOutput {
        stats,
        mean,
        template_var,
        loglik,
    })
}

/// Observed-data log-likelihood `Σ_v log p(y_v | θ)`.
pub fn observed_loglik(
    y: &Matrix,
    c_diag: &[f64],
    theta: &ThetaState,
    prior: &PreparedTemplate,
    space: &LatentSpace,
) -> Result<f64> {
    Ok(e_step(y, c_diag, theta, prior, space)?.loglik)
}
