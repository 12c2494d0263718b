//! EM drivers: exact and subspace EM with mixture nuisance priors, the
//! Gaussian template-only EM, and the fast pipeline built on it.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::model::{FitOptions, FitResult, PreparedTemplate, ThetaState};
use super::mstep::{update_mixing, update_mog, update_noise_var, SuffStats};
use super::posterior::{e_step, EStepOutput};
use super::space::{enumerate_space_capped, SpaceKind};
use crate::dualreg::dual_regress;
use crate::error::{Result, TicaError};
use crate::infomax::infomax_restarts;
use crate::linalg::{cholesky_jitter, lstsq, orthogonal_complement, orthogonalize};
use crate::matrix::{center_scale_with, Matrix, Scaling};
use crate::mog::fit_mog;
use crate::reduce::{
    eigen_spectrum, estimate_nuisance_count, estimate_order, prewhiten_with_spectrum, OrderChoice,
    ReducedData,
};
use crate::seed::derive_seed;
use crate::template::Template;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Starting template mixing matrix: the orthonormalized regression of the
/// reduced data on the template means.
fn initial_template_mixing(y: &Matrix, prior: &PreparedTemplate) -> Result<Matrix> {
    let coef = lstsq(&prior.mean.transpose(), &y.transpose(), "initial mixing")?;
    orthogonalize(&coef.transpose())
}

/// Starting parameters for the mixture-prior engines, plus the variance
/// floor of each nuisance mixture.
pub fn initialize(
    reduced: &ReducedData,
    prior: &PreparedTemplate,
    q_prime: usize,
    opts: &FitOptions,
) -> Result<(ThetaState, Vec<f64>)> {
    let a1 = initial_template_mixing(&reduced.y, prior)?;
    let a2 = orthogonal_complement(&a1, q_prime);
    let mut mog = Vec::with_capacity(q_prime);
    let mut floors = Vec::with_capacity(q_prime);
    if q_prime > 0 {
        let mut a = Matrix::zeros(reduced.order, prior.l() + q_prime);
        a.columns_mut(0, prior.l()).copy_from(&a1);
        a.columns_mut(prior.l(), q_prime).copy_from(&a2);
        let mut cinv_a = a.clone();
        for (i, mut row) in cinv_a.row_iter_mut().enumerate() {
            row /= reduced.c_diag[i];
        }
        let gram = a.transpose() * &cinv_a;
        let sources = cholesky_jitter(&gram)?.solve(&(cinv_a.transpose() * &reduced.y));
        for j in 0..q_prime {
            let row: Vec<f64> = sources.row(prior.l() + j).iter().copied().collect();
            let fit = fit_mog(&row, opts.m, derive_seed(opts.seed, 1000 + j as u64))?;
            mog.push(fit.params);
            floors.push(fit.var_floor);
        }
    }
    let theta = ThetaState {
        a1,
        a2,
        nu0_sq: reduced.sigma2,
        mog,
    };
    Ok((theta, floors))
}

struct IterationOutcome {
    theta: ThetaState,
    last: EStepOutput,
    n_iters: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Alternates E- and M-steps until the posterior template means and the
/// noise scale settle or `max_iters` M-steps have run.
fn iterate(
    mut theta: ThetaState,
    opts: &FitOptions,
    c_diag: &DVector<f64>,
    floors: &[f64],
    mut e: impl FnMut(&ThetaState) -> Result<EStepOutput>,
) -> Result<IterationOutcome> {
    let l = theta.l();
    let mut trace = Vec::new();
    let mut previous: Option<(Matrix, f64)> = None;
    let mut n_iters = 0;
    loop {
        let out = e(&theta)?;
        if !out.loglik.is_finite() {
            return Err(TicaError::Numerical("non-finite log-likelihood".into()));
        }
        trace.push(out.loglik);
        if let Some((prev_mean, prev_nu)) = &previous {
            let shift = (out.mean.rows(0, l) - prev_mean).amax();
            let rel_nu = (theta.nu0_sq - prev_nu).abs() / prev_nu;
            if shift < opts.mean_tol && rel_nu < opts.nu_tol {
                return Ok(IterationOutcome {
                    theta,
                    last: out,
                    n_iters,
                    converged: true,
                    trace,
                });
            }
        }
        if n_iters == opts.max_iters {
            log::warn!("EM stopped after {n_iters} iterations without converging");
            return Ok(IterationOutcome {
                theta,
                last: out,
                n_iters,
                converged: false,
                trace,
            });
        }
        previous = Some((out.mean.rows(0, l).into_owned(), theta.nu0_sq));
        theta = m_step(&theta, &out.stats, c_diag, floors, opts.orthogonalize)?;
        n_iters += 1;
    }
}

fn m_step(
    theta: &ThetaState,
    stats: &SuffStats,
    c_diag: &DVector<f64>,
    floors: &[f64],
    orthogonalize_columns: bool,
) -> Result<ThetaState> {
    let a = update_mixing(&stats.s_ys, &stats.s_ss, orthogonalize_columns)?;
    let nu0_sq = update_noise_var(stats, &a, c_diag);
    let mog = if theta.q_prime() > 0 {
        update_mog(stats, &theta.mog, floors)?
    } else {
        Vec::new()
    };
    Ok(ThetaState {
        a1: a.columns(0, theta.l()).into_owned(),
        a2: a.columns(theta.l(), theta.q_prime()).into_owned(),
        nu0_sq,
        mog,
    })
}

fn check_shapes(reduced: &ReducedData, template: &Template, q_prime: usize) -> Result<()> {
    if reduced.y.ncols() != template.v() {
        return Err(TicaError::DimensionMismatch(format!(
            "data has {} locations, template has {}",
            reduced.y.ncols(),
            template.v()
        )));
    }
    if reduced.order != template.l() + q_prime {
        return Err(TicaError::DimensionMismatch(format!(
            "model order {} differs from L + Q' = {} + {q_prime}",
            reduced.order,
            template.l()
        )));
    }
    Ok(())
}

fn fit_mixture_model(
    reduced: &ReducedData,
    template: &Template,
    q_prime: usize,
    kind: SpaceKind,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_shapes(reduced, template, q_prime)?;
    let prior = PreparedTemplate::new(template)?;
    let space = enumerate_space_capped(q_prime, opts.m, kind, opts.space_cap)?;
    let (theta, floors) = initialize(reduced, &prior, q_prime, opts)?;
    let c = reduced.c_diag.as_slice();
    let outcome = iterate(theta, opts, &reduced.c_diag, &floors, |theta| {
        e_step(&reduced.y, c, theta, &prior, &space)
    })?;
    let l = prior.l();
    let last = &outcome.last;
    Ok(FitResult {
        template_mean: prior.restore_mean(&last.mean.rows(0, l).into_owned()),
        template_var: prior.restore_var(&last.template_var),
        nuisance_mean: (q_prime > 0).then(|| last.mean.rows(l, q_prime).into_owned()),
        theta: outcome.theta,
        n_iters: outcome.n_iters,
        converged: outcome.converged,
        loglik_trace: outcome.trace,
        order: reduced.order,
        q_prime,
    })
}

/// EM over the full latent state space. Requires `reduced.order = L + Q′`.
pub fn fit_exact(reduced: &ReducedData, template: &Template, q_prime: usize, opts: &FitOptions) -> Result<FitResult> {
    fit_mixture_model(reduced, template, q_prime, SpaceKind::Full, opts)
}

/// EM restricted to states with at most one activated nuisance source.
pub fn fit_subspace(
    reduced: &ReducedData,
    template: &Template,
    q_prime: usize,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_mixture_model(reduced, template, q_prime, SpaceKind::Subspace, opts)
}

/// Closed-form E-step for template sources only, by Gaussian conditioning:
/// `y ~ N(A s₀, A Σ_v Aᵀ + ν₀² C)`.
fn gaussian_e_step(y: &Matrix, c_diag: &DVector<f64>, theta: &ThetaState, prior: &PreparedTemplate) -> Result<EStepOutput> {
    let (q, v) = y.shape();
    let l = prior.l();
    let a = &theta.a1;
    let a_t = a.transpose();
    let mut stats = SuffStats::zeros(q, l, 0, 0);
    let mut mean = Matrix::zeros(l, v);
    let mut template_var = Matrix::zeros(l, v);
    let mut loglik = 0.0;
    let noise = Matrix::from_diagonal(&c_diag.map(|c| c * theta.nu0_sq));
    for col in 0..v {
        let s0 = prior.mean.column(col);
        let d = prior.var.column(col);
        let mut a_d = a.clone();
        for (j, mut column) in a_d.column_iter_mut().enumerate() {
            column *= d[j];
        }
        let cov_y = &a_d * &a_t + &noise;
        let chol = cholesky_jitter(&cov_y)
            .map_err(|e| TicaError::Numerical(format!("location {col}: {e}")))?;
        let resid = y.column(col) - a * s0;
        let alpha = chol.solve(&resid);
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        loglik += -0.5 * (q as f64 * LN_2PI + log_det + resid.dot(&alpha));
        let gain = chol.solve(&a_d).transpose();
        let mu = s0 + &gain * &resid;
        let mut cov = -(&gain * &a_d);
        for j in 0..l {
            cov[(j, j)] += d[j];
        }
        let yv = y.column(col);
        stats.n_locations += 1;
        stats.y_cinv_y += yv.iter().zip(c_diag.iter()).map(|(x, c)| x * x / c).sum::<f64>();
        stats.s_ys += yv * mu.transpose();
        stats.s_ss += &cov + &mu * mu.transpose();
        for j in 0..l {
            template_var[(j, col)] = cov[(j, j)].max(0.0);
        }
        mean.set_column(col, &mu);
    }
    Ok(EStepOutput {
        stats,
        mean,
        template_var,
        loglik,
    })
}

/// EM for the template sources with nuisance already removed, so the
/// posterior is Gaussian. `reduced` should have order `L`.
pub fn fast_em_core(reduced: &ReducedData, template: &Template, opts: &FitOptions) -> Result<FitResult> {
    check_shapes(reduced, template, reduced.order.saturating_sub(template.l()))?;
    let prior = PreparedTemplate::new(template)?;
    let theta = ThetaState {
        a1: initial_template_mixing(&reduced.y, &prior)?,
        a2: Matrix::zeros(reduced.order, 0),
        nu0_sq: reduced.sigma2,
        mog: Vec::new(),
    };
    let outcome = iterate(theta, opts, &reduced.c_diag, &[], |theta| {
        gaussian_e_step(&reduced.y, &reduced.c_diag, theta, &prior)
    })?;
    Ok(FitResult {
        template_mean: prior.restore_mean(&outcome.last.mean),
        template_var: prior.restore_var(&outcome.last.template_var),
        nuisance_mean: None,
        theta: outcome.theta,
        n_iters: outcome.n_iters,
        converged: outcome.converged,
        loglik_trace: outcome.trace,
        order: reduced.order,
        q_prime: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastOptions {
    pub fit: FitOptions,
    pub scaling: Scaling,
    pub order: OrderChoice,
    /// Fixed nuisance count; estimated from the residual spectrum when unset.
    pub q_prime: Option<usize>,
    pub ica_runs: usize,
    pub reestimate_nuisance: bool,
}

impl Default for FastOptions {
    fn default() -> Self {
        FastOptions {
            fit: FitOptions::default(),
            scaling: Scaling::default(),
            order: OrderChoice::Auto,
            q_prime: None,
            ica_runs: 5,
            reestimate_nuisance: true,
        }
    }
}

/// Wall-clock time per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub nuisance: Duration,
    pub em: Duration,
    pub reestimate: Duration,
}

#[derive(Debug, Clone)]
pub struct FastFit {
    /// `order` is the estimated model order `Q`; `nuisance_mean` holds the
    /// unit-variance nuisance ICs.
    pub result: FitResult,
    pub timings: StageTimings,
    /// Set when the estimated order was below `L` and raised to it.
    pub low_order: bool,
}

/// Model order `Q` and nuisance count `Q′` chosen for one scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub order: usize,
    pub q_prime: usize,
    /// Set when the estimated order was below `L` and raised to it.
    pub low_order: bool,
}

struct ScanSetup {
    data: Matrix,
    whitened: ReducedData,
    residual: Matrix,
    selection: OrderSelection,
}

fn setup_scan(x: &Matrix, template: &Template, prior: &PreparedTemplate, opts: &FastOptions) -> Result<ScanSetup> {
    let l = template.l();
    if x.ncols() != template.v() {
        return Err(TicaError::DimensionMismatch(format!(
            "scan has {} locations, template has {}",
            x.ncols(),
            template.v()
        )));
    }
    let data = center_scale_with(x, opts.scaling)?.data;
    let v = data.ncols();
    let (values, vectors) = eigen_spectrum(&data)?;
    let mut order = match opts.order {
        OrderChoice::Fixed(q) => q,
        OrderChoice::Auto => estimate_order(values.as_slice(), v)?.order,
    };
    let low_order = order < l;
    if low_order {
        log::warn!("estimated order {order} is below L = {l}; using L and no nuisance ICs");
        order = l;
    }
    let whitened = prewhiten_with_spectrum(&data, values, &vectors, OrderChoice::Fixed(order))?;
    let dr = dual_regress(&data, &prior.mean)?;
    let residual = &data - &dr.mixing * &dr.sources;
    let max_nuisance = order - l;
    let q_prime = if low_order {
        0
    } else if let Some(q) = opts.q_prime {
        q.min(max_nuisance)
    } else {
        let (res_values, _) = eigen_spectrum(&residual)?;
        estimate_nuisance_count(res_values.as_slice(), v, max_nuisance)
    };
    log::debug!("order {order}, nuisance ICs {q_prime}");
    Ok(ScanSetup {
        data,
        whitened,
        residual,
        selection: OrderSelection {
            order,
            q_prime,
            low_order,
        },
    })
}

/// The order and nuisance count `fit_fast` would use for this scan.
pub fn select_orders(x: &Matrix, template: &Template, opts: &FastOptions) -> Result<OrderSelection> {
    let prior = PreparedTemplate::new(template)?;
    Ok(setup_scan(x, template, &prior, opts)?.selection)
}

/// Fast two-stage fit for one scan (T×V, raw): estimate and remove nuisance
/// ICs with dual regression and infomax, then run the Gaussian EM on the
/// cleaned data reduced to `L` dimensions.
pub fn fit_fast(x: &Matrix, template: &Template, opts: &FastOptions) -> Result<FastFit> {
    let start = Instant::now();
    let l = template.l();
    let prior = PreparedTemplate::new(template)?;
    let ScanSetup {
        data,
        whitened,
        residual,
        selection,
    } = setup_scan(x, template, &prior, opts)?;
    let OrderSelection {
        order,
        q_prime,
        low_order,
    } = selection;

    let back = whitened.back_projector();
    let mut cleaned = data.clone();
    let mut nuisance = None;
    if q_prime > 0 {
        let ica = infomax_restarts(&(&whitened.h * &residual), q_prime, opts.ica_runs, derive_seed(opts.fit.seed, 1))?;
        cleaned -= &back * (&ica.mixing * &ica.sources);
        nuisance = Some(ica.sources);
    }
    let reduced = if q_prime == 0 && order == l {
        whitened.clone()
    } else {
        let (clean_values, clean_vectors) = eigen_spectrum(&cleaned)?;
        prewhiten_with_spectrum(&cleaned, clean_values, &clean_vectors, OrderChoice::Fixed(l))?
    };
    let nuisance_time = start.elapsed();

    let em_start = Instant::now();
    let mut result = fast_em_core(&reduced, template, &opts.fit)?;
    let em_time = em_start.elapsed();

    let re_start = Instant::now();
    if q_prime > 0 && opts.reestimate_nuisance {
        let template_part = reduced.back_projector() * (&result.theta.a1 * prior.to_internal(&result.template_mean));
        let refreshed = &data - template_part;
        let ica = infomax_restarts(&(&whitened.h * &refreshed), q_prime, opts.ica_runs, derive_seed(opts.fit.seed, 2))?;
        nuisance = Some(ica.sources);
    }
    let reestimate_time = re_start.elapsed();

    result.order = order;
    result.q_prime = q_prime;
    result.nuisance_mean = nuisance;
    Ok(FastFit {
        result,
        timings: StageTimings {
            nuisance: nuisance_time,
            em: em_time,
            reestimate: reestimate_time,
        },
        low_order,
    })
}
