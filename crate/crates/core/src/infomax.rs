//! Infomax ICA with a logistic nonlinearity, repeated restarts and
//! average-link clustering of the resulting maps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Result, TicaError};
use crate::linalg::{lstsq, orthogonalize, pearson, row_vec, skewness, sym_eigen_desc};
use crate::matrix::Matrix;
use crate::seed::derive_seed;

const MAX_EPOCHS: usize = 500;
const CONVERGED_CHANGE: f64 = 1e-6;
const NONCONVERGED_CHANGE: f64 = 1e-3;
const INITIAL_RATE: f64 = 0.01;
const MIN_RATE: f64 = 1e-12;

/// Result of a single Infomax run.
#[derive(Debug, Clone)]
pub struct InfomaxRun {
    /// Q×q_out mixing matrix.
    pub mixing: Matrix,
    /// q_out×V unit-variance, skew-positive sources.
    pub sources: Matrix,
    pub epochs: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct IcaResult {
    pub mixing: Matrix,
    pub sources: Matrix,
    pub n_runs: usize,
    /// Mean within-cluster |r|, one entry per source, non-increasing.
    pub cluster_quality: Vec<f64>,
    /// Runs that met the convergence threshold.
    pub converged_runs: usize,
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// log σ(u)(1−σ(u)), written to stay finite for large |u|.
fn log_logistic_density(u: f64) -> f64 {
    -u.abs() - 2.0 * (-u.abs()).exp().ln_1p()
}

fn epoch_objective(w: &Matrix, x: &Matrix) -> f64 {
    let u = w * x;
    let n = x.ncols() as f64;
    let density: f64 = u.iter().map(|&v| log_logistic_density(v)).sum::<f64>() / n;
    w.determinant().abs().ln() + density
}

pub fn infomax_single(y: &Matrix, q_out: usize, seed: u64) -> Result<InfomaxRun> {
    let (q, v) = y.shape();
    if q_out == 0 || q_out > q {
        return Err(TicaError::DimensionMismatch(format!(
            "cannot extract {q_out} sources from {q} dimensions"
        )));
    }
    let mut centered = y.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let cov = &centered * centered.transpose() / v as f64;
    let (values, vectors) = sym_eigen_desc(&cov)?;
    if !(values[q_out - 1] > 1e-12 * values[0].max(f64::MIN_POSITIVE)) {
        return Err(TicaError::RankDeficient(format!(
            "data have fewer than {q_out} non-degenerate directions"
        )));
    }
    let basis = vectors.columns(0, q_out).into_owned();
    let mut whitener = basis.transpose();
    for (i, mut row) in whitener.row_iter_mut().enumerate() {
        row /= values[i].sqrt();
    }
    let x = &whitener * &centered;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Matrix::from_fn(q_out, q_out, |_, _| rng.sample(StandardNormal));
    let mut w = orthogonalize(&start)?;

    let block = ((v as f64 / 3.0).sqrt().ceil() as usize).clamp(1, v);
    let mut order: Vec<usize> = (0..v).collect();
    let mut rate = INITIAL_RATE;
    let mut objective = epoch_objective(&w, &x);
    let identity = Matrix::identity(q_out, q_out);
    let mut change = f64::INFINITY;
    let mut epochs = 0;
    while epochs < MAX_EPOCHS {
        epochs += 1;
        let previous = w.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(block) {
            let xb = Matrix::from_fn(q_out, batch.len(), |r, c| x[(r, batch[c])]);
            let u = &w * &xb;
            let score = u.map(|val| 1.0 - 2.0 * logistic(val));
            let grad = (&identity + score * u.transpose() / batch.len() as f64) * &w;
            w += grad * rate;
        }
        if w.iter().any(|val| !val.is_finite()) {
            // step blew up: restart the epoch from the previous weights
            w = previous;
            rate *= 0.5;
            if rate < MIN_RATE {
                break;
            }
            continue;
        }
        let next = epoch_objective(&w, &x);
        if next < objective {
            rate *= 0.5;
        }
        objective = next;
        change = (&w - &previous).norm() / previous.norm();
        if change < CONVERGED_CHANGE || rate < MIN_RATE {
            break;
        }
    }
    let converged = change <= NONCONVERGED_CHANGE;
    if !converged {
        log::warn!("infomax stopped after {epochs} epochs with weight change {change:.2e}");
    }

    let mut sources = &w * &x;
    let w_inv = w
        .clone()
        .try_inverse()
        .ok_or_else(|| TicaError::Numerical("infomax unmixing matrix is singular".into()))?;
    let mut dewhiten = basis;
    for (i, mut col) in dewhiten.column_iter_mut().enumerate() {
        col *= values[i].sqrt();
    }
    let mut mixing = dewhiten * w_inv;
    for k in 0..q_out {
        let sd = row_sd(&sources, k);
        let sign = if skewness(&row_vec(&sources, k)) < 0.0 { -1.0 } else { 1.0 };
        sources.row_mut(k).scale_mut(sign / sd);
        mixing.column_mut(k).scale_mut(sign * sd);
    }
    Ok(InfomaxRun {
        mixing,
        sources,
        epochs,
        converged,
    })
}

fn row_sd(m: &Matrix, r: usize) -> f64 {
    let row = m.row(r);
    let n = row.len() as f64;
    let mean = row.mean();
    (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Multiplies each row by −1 when its sample skewness is negative.
pub fn fix_signs(sources: &Matrix) -> Matrix {
    let mut out = sources.clone();
    for r in 0..out.nrows() {
        if skewness(&row_vec(sources, r)) < 0.0 {
            out.row_mut(r).neg_mut();
        }
    }
    out
}

pub fn infomax_restarts(y: &Matrix, q_out: usize, n_runs: usize, seed: u64) -> Result<IcaResult> {
    if n_runs == 0 {
        return Err(TicaError::DegenerateInput("at least one infomax run is required".into()));
    }
    let runs: Vec<InfomaxRun> = (0..n_runs)
        .into_par_iter()
        .map(|run| infomax_single(y, q_out, derive_seed(seed, run as u64)))
        .collect::<Result<Vec<_>>>()?;
    let converged_runs = runs.iter().filter(|r| r.converged).count();
    if n_runs == 1 {
        let run = runs.into_iter().next().unwrap();
        return Ok(IcaResult {
            mixing: run.mixing,
            sources: run.sources,
            n_runs,
            cluster_quality: vec![1.0; q_out],
            converged_runs,
        });
    }
    let maps: Vec<Matrix> = runs.iter().map(|r| r.sources.clone()).collect();
    let (sources, cluster_quality) = cluster_runs(&maps, q_out);
    let mut centered = y.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let (mixing, sources, cluster_quality) =
        match lstsq(&sources.transpose(), &centered.transpose(), "infomax cluster centroids") {
            Ok(mixing_t) => (mixing_t.transpose(), sources, cluster_quality),
            Err(e) => {
                log::warn!("cluster centroids are collinear ({e}); keeping the first run");
                (runs[0].mixing.clone(), runs[0].sources.clone(), vec![1.0; q_out])
            }
        };
    Ok(IcaResult {
        mixing,
        sources,
        n_runs,
        cluster_quality,
        converged_runs,
    })
}

/// Clusters the rows of several runs into `k` groups by average linkage on
/// `1 − |r|`. Returns unit-variance, skew-positive centroids sorted by
/// within-cluster mean |r| (descending), and those qualities.
pub fn cluster_runs(runs: &[Matrix], k: usize) -> (Matrix, Vec<f64>) {
    let rows: Vec<Vec<f64>> = runs
        .iter()
        .flat_map(|m| m.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()))
        .collect();
    let n = rows.len();
    let v = rows[0].len();
    let mut corr = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let r = pearson(&rows[i], &rows[j]);
            corr[i][j] = r;
            corr[j][i] = r;
        }
    }
    let dist = |a: &[usize], b: &[usize]| -> f64 {
        let mut total = 0.0;
        for &i in a {
            for &j in b {
                total += 1.0 - corr[i][j].abs();
            }
        }
        total / (a.len() * b.len()) as f64
    };
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while clusters.len() > k {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let d = dist(&clusters[a], &clusters[b]);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let merged = clusters.remove(best.2);
        clusters[best.1].extend(merged);
        clusters[best.1].sort_unstable();
    }

    let mut scored: Vec<(f64, Vec<f64>, usize)> = clusters
        .iter()
        .map(|members| {
            let reference = members[0];
            let mut centroid = vec![0.0; v];
            for &m in members {
                let sign = if corr[reference][m] < 0.0 { -1.0 } else { 1.0 };
                for (c, x) in centroid.iter_mut().zip(&rows[m]) {
                    *c += sign * x;
                }
            }
            let mean = centroid.iter().sum::<f64>() / v as f64;
            let sd = (centroid.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (v as f64 - 1.0)).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            centroid.iter_mut().for_each(|c| *c = (*c - mean) / sd);
            if skewness(&centroid) < 0.0 {
                centroid.iter_mut().for_each(|c| *c = -*c);
            }
            let mut pairs = 0usize;
            let mut total = 0.0;
            for (ai, &a) in members.iter().enumerate() {
                for &b in &members[ai + 1..] {
                    total += corr[a][b].abs();
                    pairs += 1;
                }
            }
            let quality = if pairs == 0 { 1.0 } else { total / pairs as f64 };
            (quality, centroid, reference)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
    let centroids = Matrix::from_fn(k, v, |r, c| scored[r].1[c]);
    let quality = scored.iter().map(|s| s.0).collect();
    (centroids, quality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Exp};

    fn laplace_sources(k: usize, v: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Exp::new(1.0).unwrap();
        Matrix::from_fn(k, v, |_, _| {
            let mag = e.sample(&mut rng);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
    }

    fn best_abs_corr(est: &Matrix, truth: &Matrix, row: usize) -> f64 {
        let t: Vec<f64> = truth.row(row).iter().copied().collect();
        (0..est.nrows())
            .map(|r| {
                let e: Vec<f64> = est.row(r).iter().copied().collect();
                pearson(&e, &t).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn recovers_two_laplace_sources() {
        let s = laplace_sources(2, 3000, 1);
        let a = Matrix::from_row_slice(3, 2, &[1.0, 0.5, 0.3, 1.0, -0.7, 0.4]);
        let y = &a * &s;
        let run = infomax_single(&y, 2, 7).unwrap();
        for r in 0..2 {
            assert!(best_abs_corr(&run.sources, &s, r) >= 0.95);
        }
        for r in 0..2 {
            assert!((row_sd(&run.sources, r) - 1.0).abs() < 1e-10);
            assert!(skewness(&row_vec(&run.sources, r)) >= 0.0);
        }
    }

    #[test]
    fn reconstructs_pca_projection() {
        let s = laplace_sources(3, 2000, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Matrix::from_fn(5, 2000, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let a = Matrix::from_fn(5, 3, |_, _| rng.sample(StandardNormal));
        let mut y = a * s + noise;
        for mut row in y.row_iter_mut() {
            let m = row.mean();
            row.add_scalar_mut(-m);
        }
        let run = infomax_single(&y, 3, 4).unwrap();
        let (_, vecs) = sym_eigen_desc(&(&y * y.transpose())).unwrap();
        let basis = vecs.columns(0, 3);
        let projection = basis * basis.transpose() * &y;
        let err = (&run.mixing * &run.sources - &projection).norm() / projection.norm();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn single_source_is_dominant_direction() {
        let s = laplace_sources(1, 1000, 5);
        let a = Matrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
        let y = &a * &s;
        let run = infomax_single(&y, 1, 0).unwrap();
        let e: Vec<f64> = run.sources.row(0).iter().copied().collect();
        let t: Vec<f64> = s.row(0).iter().copied().collect();
        assert!(pearson(&e, &t).abs() >= 0.999);
    }

    #[test]
    fn gaussian_data_still_returns() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = Matrix::from_fn(3, 1500, |_, _| rng.sample(StandardNormal));
        let run = infomax_single(&y, 2, 1).unwrap();
        assert_eq!(run.sources.shape(), (2, 1500));
    }

    #[test]
    fn single_restart_matches_single_run() {
        let s = laplace_sources(2, 1000, 8);
        let y = Matrix::from_row_slice(2, 2, &[1.0, 0.4, -0.2, 1.0]) * &s;
        let one = infomax_restarts(&y, 2, 1, 11).unwrap();
        let direct = infomax_single(&y, 2, derive_seed(11, 0)).unwrap();
        assert_eq!(one.sources, direct.sources);
        assert_eq!(one.mixing, direct.mixing);
        assert_eq!(one.cluster_quality, vec![1.0, 1.0]);
    }

    #[test]
    fn stable_problem_clusters_tightly() {
        let s = laplace_sources(2, 3000, 9);
        let y = Matrix::from_row_slice(3, 2, &[1.0, 0.2, 0.5, 1.0, 0.1, -0.3]) * &s;
        let res = infomax_restarts(&y, 2, 5, 3).unwrap();
        assert!(res.cluster_quality.iter().all(|&q| q >= 0.95));
        let again = infomax_restarts(&y, 2, 5, 3).unwrap();
        assert_eq!(res.sources, again.sources);
        assert_eq!(res.mixing, again.mixing);
        assert_eq!(res.cluster_quality, again.cluster_quality);
    }

    #[test]
    fn clustering_ignores_permutation_and_sign() {
        let base = fix_signs(&laplace_sources(3, 500, 10));
        let mut permuted = Matrix::zeros(3, 500);
        permuted.set_row(0, &(-base.row(2)));
        permuted.set_row(1, &base.row(0));
        permuted.set_row(2, &(-base.row(1)));
        let (a, qa) = cluster_runs(&[base.clone(), base.clone()], 3);
        let (b, qb) = cluster_runs(&[base.clone(), permuted], 3);
        assert!((a - b).amax() < 1e-12);
        assert_eq!(qa, qb);
    }

    #[test]
    fn fix_signs_rules() {
        let m = Matrix::from_row_slice(2, 4, &[0.0, 0.0, 0.0, -10.0, -1.0, 0.0, 0.0, 1.0]);
        let f = fix_signs(&m);
        assert_eq!(f.row(0).into_owned(), -m.row(0));
        assert_eq!(f.row(1), m.row(1));
        assert_eq!(fix_signs(&f), f);
    }

    proptest::proptest! {
        #[test]
        fn fix_signs_is_idempotent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(3, 20, |_, _| rng.random_range(-1.0..1.0f64).powi(3));
            let once = fix_signs(&m);
            proptest::prop_assert_eq!(fix_signs(&once), once);
        }
    }
}
