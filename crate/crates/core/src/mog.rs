//! One-dimensional Gaussian mixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TicaError};
use crate::linalg::logsumexp;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const MAX_ITERS: usize = 1000;
const REL_TOL: f64 = 1e-10;

/// Mixture parameters. Components are ordered by increasing variance, so the
/// widest ("activation") component is last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MogParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl MogParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, vars: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || vars.len() != m {
            return Err(TicaError::DimensionMismatch(format!(
                "mixture with {} weights, {} means, {} variances",
                m,
                means.len(),
                vars.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(TicaError::DegenerateInput(format!(
                "mixture weights must be positive and sum to 1, got {weights:?}"
            )));
        }
        if vars.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || means.iter().any(|v| !v.is_finite()) {
            return Err(TicaError::DegenerateInput("mixture variances must be positive".into()));
        }
        Ok(MogParams { weights, means, vars })
    }

    pub fn m(&self) -> usize {
        self.weights.len()
    }

    /// Reorders components by increasing variance (stable).
    pub fn sort_by_variance(&mut self) {
        let mut order: Vec<usize> = (0..self.m()).collect();
        order.sort_by(|&a, &b| self.vars[a].total_cmp(&self.vars[b]));
        self.weights = order.iter().map(|&i| self.weights[i]).collect();
        self.means = order.iter().map(|&i| self.means[i]).collect();
        self.vars = order.iter().map(|&i| self.vars[i]).collect();
    }
}

/// Log density of one Gaussian component.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

pub fn mog_logpdf(params: &MogParams, x: f64) -> f64 {
    let terms: Vec<f64> = (0..params.m())
        .map(|k| params.weights[k].ln() + normal_logpdf(x, params.means[k], params.vars[k]))
        .collect();
    logsumexp(&terms)
}

pub fn mog_loglik(params: &MogParams, samples: &[f64]) -> f64 {
    samples.iter().map(|&x| mog_logpdf(params, x)).sum()
}

pub fn sample_mog(params: &MogParams, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = params.m() - 1;
            for (i, w) in params.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let z: f64 = rng.sample(StandardNormal);
            params.means[k] + params.vars[k].sqrt() * z
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MogFit {
    pub params: MogParams,
    pub var_floor: f64,
    /// Sample log-likelihood after initialization and after each EM step.
    pub loglik_trace: Vec<f64>,
}

/// Fits an `m`-component mixture by EM from a quantile-split start.
pub fn fit_mog(samples: &[f64], m: usize, seed: u64) -> Result<MogFit> {
    let n = samples.len();
    if m == 0 || n < 10 * m {
        return Err(TicaError::DegenerateInput(format!(
            "fitting {m} components needs at least {} samples, got {n}",
            10 * m
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(TicaError::Numerical("non-finite sample".into()));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let sample_var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let var_floor = (1e-6 * sample_var).max(1e-300);

    let mut params = quantile_init(samples, m, var_floor, seed);
    let mut trace = vec![mog_loglik(&params, samples)];
    let mut resp = vec![0.0; m];
    for _ in 0..MAX_ITERS {
        let mut w_sum = vec![0.0; m];
        let mut x_sum = vec![0.0; m];
        let mut xx_sum = vec![0.0; m];
        for &x in samples {
            for k in 0..m {
                resp[k] = params.weights[k].ln() + normal_logpdf(x, params.means[k], params.vars[k]);
            }
            let norm = logsumexp(&resp);
            for k in 0..m {
                let r = (resp[k] - norm).exp();
                w_sum[k] += r;
                x_sum[k] += r * x;
                xx_sum[k] += r * x * x;
            }
        }
        for k in 0..m {
            // a starved component keeps a tiny weight so log π stays finite
            let w = w_sum[k].max(1e-300);
            let mu = x_sum[k] / w;
            let var = (xx_sum[k] / w - mu * mu).max(var_floor);
            params.weights[k] = w / nf;
            params.means[k] = mu;
            params.vars[k] = var;
        }
        let total: f64 = params.weights.iter().sum();
        params.weights.iter_mut().for_each(|w| *w /= total);
        let ll = mog_loglik(&params, samples);
        if !ll.is_finite() {
            return Err(TicaError::Numerical("mixture likelihood is not finite".into()));
        }
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if (ll - prev).abs() <= REL_TOL * prev.abs().max(1.0) {
            break;
        }
    }
    params.sort_by_variance();
    Ok(MogFit {
        params,
        var_floor,
        loglik_trace: trace,
    })
}

fn quantile_init(samples: &[f64], m: usize, var_floor: f64, seed: u64) -> MogParams {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut weights = Vec::with_capacity(m);
    let mut means = Vec::with_capacity(m);
    let mut vars = Vec::with_capacity(m);
    for k in 0..m {
        let group = &sorted[k * n / m..(k + 1) * n / m];
        let g = group.len() as f64;
        let mu = group.iter().sum::<f64>() / g;
        let var = group.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / g;
        weights.push(g / n as f64);
        means.push(mu);
        vars.push(var.max(var_floor));
    }
    // groups drawn from a run of tied values start identical; nudge them apart
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 1..m {
        if means[k] <= means[k - 1] {
            let step = var_floor.sqrt() * (1.0 + rng.random::<f64>());
            means[k] = means[k - 1] + step;
        }
    }
    MogParams { weights, means, vars }
}
