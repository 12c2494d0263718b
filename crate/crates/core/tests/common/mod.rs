//! Model-drawn micro problems and brute-force oracles shared by the EM
//! test targets.
#![allow(dead_code)]

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tica_core::em::{PreparedTemplate, TemplateSlice, ThetaState};
use tica_core::linalg::orthogonalize;
use tica_core::mog::{sample_mog, MogParams};
use tica_core::reduce::ReducedData;
use tica_core::template::Template;
use tica_core::Matrix;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub struct Problem {
    pub reduced: ReducedData,
    pub template: Template,
    pub truth: Matrix,
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn nuisance_mog() -> MogParams {
    MogParams::new(vec![0.6, 0.3, 0.1], vec![0.0, 0.2, 2.5], vec![0.05, 0.3, 1.5]).unwrap()
}

/// Reduced-space data drawn from the model with `q_prime` mixture sources.
pub fn problem(l: usize, q_prime: usize, v: usize, nu0_sq: f64, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = l + q_prime;
    let a = orthogonalize(&gaussian(q, q, &mut rng)).unwrap();
    let mean = Matrix::from_fn(l, v, |_, _| {
        let x: f64 = rng.sample(StandardNormal);
        if x > 0.8 { 2.0 * x } else { 0.3 * x }
    });
    let var = Matrix::from_fn(l, v, |_, _| 0.1 + 0.2 * rng.random::<f64>());
    let mut s = Matrix::zeros(q, v);
    for j in 0..l {
        for c in 0..v {
            let z: f64 = rng.sample(StandardNormal);
            s[(j, c)] = mean[(j, c)] + var[(j, c)].sqrt() * z;
        }
    }
    for j in 0..q_prime {
        let row = sample_mog(&nuisance_mog(), v, seed * 31 + j as u64);
        for c in 0..v {
            s[(l + j, c)] = row[c];
        }
    }
    let c_diag = DVector::from_fn(q, |_, _| 0.5 + 1.5 * rng.random::<f64>());
    let noise = Matrix::from_fn(q, v, |i, _| {
        let z: f64 = rng.sample(StandardNormal);
        (nu0_sq * c_diag[i]).sqrt() * z
    });
    let y = &a * &s + noise;
    let reduced = ReducedData {
        y,
        h: Matrix::identity(q, q),
        c_diag,
        sigma2: nu0_sq,
        order: q,
        eigenvalues: DVector::from_element(q, 1.0),
        low_rank_warning: false,
    };
    Problem {
        reduced,
        template: Template::known(mean, var).unwrap(),
        truth: s.rows(0, l).into_owned(),
    }
}

pub fn random_theta(l: usize, q_prime: usize, seed: u64) -> ThetaState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = l + q_prime;
    let a = gaussian(q, q, &mut rng);
    let mog = (0..q_prime)
        .map(|j| {
            let shift = 0.1 * j as f64;
            MogParams::new(vec![0.5, 0.3, 0.2], vec![shift, 0.5, 1.8 - shift], vec![0.1, 0.4, 2.0 + shift]).unwrap()
        })
        .collect();
    ThetaState {
        a1: a.columns(0, l).into_owned(),
        a2: a.columns(l, q_prime).into_owned(),
        nu0_sq: 0.4,
        mog,
    }
}

/// Prior mean and variance of all sources under configuration `z`.
pub fn prior_for(theta: &ThetaState, slice: TemplateSlice<'_>, z: &[u8]) -> (DVector<f64>, DVector<f64>) {
    let l = theta.l();
    let k = l + z.len();
    let mut m = DVector::zeros(k);
    let mut d = DVector::zeros(k);
    for j in 0..l {
        m[j] = slice.mean[j];
        d[j] = slice.var[j];
    }
    for (j, &label) in z.iter().enumerate() {
        m[l + j] = theta.mog[j].means[label as usize];
        d[l + j] = theta.mog[j].vars[label as usize];
    }
    (m, d)
}

/// Joint log weight through the marginal `y | z ~ N(A m_z, A D_z Aᵀ + ν₀² C)`,
/// with an explicit inverse and determinant.
pub fn naive_log_weight(y: &[f64], c: &[f64], theta: &ThetaState, slice: TemplateSlice<'_>, z: &[u8]) -> f64 {
    let a = theta.mixing();
    let (m, d) = prior_for(theta, slice, z);
    let q = y.len();
    let cov = &a * Matrix::from_diagonal(&d) * a.transpose()
        + Matrix::from_diagonal(&DVector::from_fn(q, |i, _| theta.nu0_sq * c[i]));
    let resid = DVector::from_column_slice(y) - &a * m;
    let inv = cov.clone().try_inverse().unwrap();
    let log_lik = -0.5 * (q as f64 * LN_2PI + cov.determinant().ln() + (resid.transpose() * inv * &resid)[0]);
    let log_pi: f64 = z
        .iter()
        .enumerate()
        .map(|(j, &label)| theta.mog[j].weights[label as usize].ln())
        .sum();
    log_pi + log_lik
}

/// Conditional mean and covariance by Gaussian conditioning.
pub fn naive_conditional(y: &[f64], c: &[f64], theta: &ThetaState, slice: TemplateSlice<'_>, z: &[u8]) -> (DVector<f64>, Matrix) {
    let a = theta.mixing();
    let (m, d) = prior_for(theta, slice, z);
    let q = y.len();
    let dm = Matrix::from_diagonal(&d);
    let cov_y = &a * &dm * a.transpose()
        + Matrix::from_diagonal(&DVector::from_fn(q, |i, _| theta.nu0_sq * c[i]));
    let gain = &dm * a.transpose() * cov_y.try_inverse().unwrap();
    let mean = &m + &gain * (DVector::from_column_slice(y) - &a * &m);
    let cov = &dm - &gain * &a * &dm;
    (mean, cov)
}

pub fn slice_at(prior: &PreparedTemplate, col: usize) -> (Vec<f64>, Vec<f64>) {
    (
        prior.mean.column(col).iter().copied().collect(),
        prior.var.column(col).iter().copied().collect(),
    )
}
