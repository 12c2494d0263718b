//! Accuracy and reliability measures for estimated source maps.

use crate::error::{Result, TicaError};
use crate::infomax::fix_signs;
use crate::linalg::{pearson, row_vec};
use crate::matrix::Matrix;

/// Scalar `β` minimizing `Σ (β·estimate − truth)²`; zero for an all-zero
/// estimate.
pub fn rescale_factor(estimate: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = estimate.iter().zip(truth).map(|(e, t)| e * t).sum();
    let den: f64 = estimate.iter().map(|e| e * e).sum();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Mean over subjects of the squared error after rescaling each estimated
/// component to the truth.
pub fn mse_map(estimates: &[Matrix], truth: &[Matrix]) -> Result<Matrix> {
    if estimates.len() != truth.len() {
        return Err(TicaError::DimensionMismatch(format!(
            "{} estimates for {} subjects",
            estimates.len(),
            truth.len()
        )));
    }
    if estimates.len() < 2 {
        return Err(TicaError::DegenerateInput("MSE needs at least two subjects".into()));
    }
    let shape = truth[0].shape();
    let mut out = Matrix::zeros(shape.0, shape.1);
    for (est, tru) in estimates.iter().zip(truth) {
        if est.shape() != shape || tru.shape() != shape {
            return Err(TicaError::DimensionMismatch(format!(
                "estimate {:?} and truth {:?}, expected {shape:?}",
                est.shape(),
                tru.shape()
            )));
        }
        for q in 0..shape.0 {
            let beta = rescale_factor(&row_vec(est, q), &row_vec(tru, q));
            for v in 0..shape.1 {
                out[(q, v)] += (beta * est[(q, v)] - tru[(q, v)]).powi(2);
            }
        }
    }
    Ok(out / estimates.len() as f64)
}

/// Locations where the truth is non-zero.
pub fn activation_mask(truth: &[f64]) -> Vec<bool> {
    truth.iter().map(|&x| x != 0.0).collect()
}

/// Pearson correlation over masked locations.
pub fn corr_activated(estimate: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    if estimate.len() != truth.len() || mask.len() != truth.len() {
        return Err(TicaError::DimensionMismatch(format!(
            "estimate {}, truth {}, mask {}",
            estimate.len(),
            truth.len(),
            mask.len()
        )));
    }
    let (mut e, mut t) = (Vec::new(), Vec::new());
    for i in 0..truth.len() {
        if mask[i] {
            e.push(estimate[i]);
            t.push(truth[i]);
        }
    }
    if t.len() < 3 {
        return Err(TicaError::DegenerateInput(format!("mask has {} locations", t.len())));
    }
    if t.iter().all(|&x| x == t[0]) {
        return Err(TicaError::DegenerateInput("truth is constant on the mask".into()));
    }
    Ok(pearson(&e, &t))
}

/// Greedy matching of estimated to true components by absolute
/// correlation after sign correction. Entry `i` of the result is the truth
/// row matched to estimate row `i`.
pub fn match_components(estimates: &Matrix, truth: &Matrix) -> Result<Vec<usize>> {
    let k = estimates.nrows();
    if truth.nrows() != k || truth.ncols() != estimates.ncols() || k == 0 {
        return Err(TicaError::DimensionMismatch(format!(
            "estimates {:?} and truth {:?}",
            estimates.shape(),
            truth.shape()
        )));
    }
    let est = fix_signs(estimates);
    let mut corr = vec![vec![0.0; k]; k];
    for i in 0..k {
        let e = row_vec(&est, i);
        for (j, c) in corr[i].iter_mut().enumerate() {
            *c = pearson(&e, &row_vec(truth, j)).abs();
        }
    }
    let mut assigned = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for _ in 0..k {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in (0..k).filter(|&i| assigned[i] == usize::MAX) {
            for j in (0..k).filter(|&j| !used[j]) {
                if corr[i][j] > best.0 {
                    best = (corr[i][j], i, j);
                }
            }
        }
        assigned[best.1] = best.2;
        used[best.2] = true;
    }
    Ok(assigned)
}

/// Voxelwise test–retest variance decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    pub icc: Matrix,
    pub var_between: Matrix,
    pub var_within: Matrix,
    pub var_total: Matrix,
}

fn sample_var(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let mean = values.clone().sum::<f64>() / n as f64;
    values.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// ICC per location from two sessions per subject:
/// `σ²_win = ½Var(W₂ − W₁)`, `σ²_tot = ½(Var W₁ + Var W₂)`,
/// `σ²_bwn = max(σ²_tot − σ²_win, 0)`, `ICC = σ²_bwn/σ²_tot` with 0/0 → 0.
pub fn icc_map(session1: &[Matrix], session2: &[Matrix]) -> Result<ReliabilityReport> {
    let n = session1.len();
    if session2.len() != n {
        return Err(TicaError::InconsistentCohort(format!(
            "{n} first sessions and {} second sessions",
            session2.len()
        )));
    }
    if n < 2 {
        return Err(TicaError::InconsistentCohort("ICC needs at least two subjects".into()));
    }
    let shape = session1[0].shape();
    if session1.iter().chain(session2).any(|m| m.shape() != shape) {
        return Err(TicaError::InconsistentCohort("session maps differ in shape".into()));
    }
    let (l, v) = shape;
    let mut report = ReliabilityReport {
        icc: Matrix::zeros(l, v),
        var_between: Matrix::zeros(l, v),
        var_within: Matrix::zeros(l, v),
        var_total: Matrix::zeros(l, v),
    };
    for q in 0..l {
        for loc in 0..v {
            let w1 = session1.iter().map(|m| m[(q, loc)]);
            let w2 = session2.iter().map(|m| m[(q, loc)]);
            let diff = w1.clone().zip(w2.clone()).map(|(a, b)| b - a);
            let within = 0.5 * sample_var(diff, n);
            let total = 0.5 * (sample_var(w1, n) + sample_var(w2, n));
            let between = (total - within).max(0.0);
            report.var_within[(q, loc)] = within;
            report.var_total[(q, loc)] = total;
            report.var_between[(q, loc)] = between;
            report.icc[(q, loc)] = if total > 0.0 { (between / total).min(1.0) } else { 0.0 };
        }
    }
    Ok(report)
}

/// Image-level ICC per component with weights proportional to
/// `|template_mean|`.
pub fn wi2c2(report: &ReliabilityReport, template_mean: &Matrix) -> Result<Vec<f64>> {
    if template_mean.shape() != report.icc.shape() {
        return Err(TicaError::DimensionMismatch(format!(
            "template mean {:?}, report {:?}",
            template_mean.shape(),
            report.icc.shape()
        )));
    }
    let mut out = Vec::with_capacity(template_mean.nrows());
    for q in 0..template_mean.nrows() {
        let weights: Vec<f64> = template_mean.row(q).iter().map(|x| x.abs()).collect();
        let norm: f64 = weights.iter().sum();
        if !(norm > 0.0) {
            return Err(TicaError::DegenerateInput(format!("template mean row {q} is all zero")));
        }
        let (mut between, mut total) = (0.0, 0.0);
        for (v, w) in weights.iter().enumerate() {
            between += w / norm * report.var_between[(q, v)];
            total += w / norm * report.var_total[(q, v)];
        }
        out.push(if total > 0.0 { between / total } else { 0.0 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn mse_is_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = vec![random(2, 30, &mut rng), random(2, 30, &mut rng)];
        let doubled: Vec<Matrix> = truth.iter().map(|m| m * 2.0).collect();
        assert!(mse_map(&truth, &truth).unwrap().amax() < 1e-24);
        assert!(mse_map(&doubled, &truth).unwrap().amax() < 1e-24);
        assert!(mse_map(&truth[..1], &truth[..1]).is_err());
    }

    #[test]
    fn masked_correlation() {
        let truth = [0.0, 1.0, 2.0, 0.0, 4.0];
        let mask = activation_mask(&truth);
        let mut est = truth;
        est[0] = 100.0;
        est[3] = -70.0;
        assert!((corr_activated(&est, &truth, &mask).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = truth.iter().map(|x| -x).collect();
        assert!((corr_activated(&neg, &truth, &mask).unwrap() + 1.0).abs() < 1e-12);
        assert!(corr_activated(&est, &truth, &[true, false, false, false, true]).is_err());
    }

    #[test]
    fn matching_recovers_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random(4, 200, &mut rng).map(|x: f64| x.powi(3));
        let perm = [2usize, 0, 3, 1];
        let est = Matrix::from_fn(4, 200, |i, v| truth[(perm[i], v)]);
        assert_eq!(match_components(&est, &truth).unwrap(), perm.to_vec());
        let one = truth.rows(0, 1).into_owned();
        assert_eq!(match_components(&one, &one).unwrap(), vec![0]);
    }

    #[test]
    fn icc_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let subjects: Vec<Matrix> = (0..20).map(|_| random(1, 5, &mut rng)).collect();
        let r = icc_map(&subjects, &subjects).unwrap();
        assert!(r.icc.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        let w = wi2c2(&r, &Matrix::from_element(1, 5, 1.0)).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        let flat = vec![Matrix::zeros(1, 5); 3];
        assert!(icc_map(&flat, &flat).unwrap().icc.iter().all(|&x| x == 0.0));
        assert!(icc_map(&flat, &flat[..2]).is_err());
    }

    #[test]
    fn wi2c2_of_indicator_is_voxel_icc() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s1: Vec<Matrix> = (0..15).map(|_| random(1, 4, &mut rng)).collect();
        let s2: Vec<Matrix> = s1.iter().map(|m| m + random(1, 4, &mut rng) * 0.7).collect();
        let r = icc_map(&s1, &s2).unwrap();
        let mut indicator = Matrix::zeros(1, 4);
        indicator[(0, 2)] = 3.0;
        let w = wi2c2(&r, &indicator).unwrap();
        assert!((w[0] - r.icc[(0, 2)]).abs() < 1e-12);
        assert!(wi2c2(&r, &Matrix::zeros(1, 4)).is_err());
    }
}
