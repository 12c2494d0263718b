//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::DVector;

use crate::error::{Result, TicaError};
use crate::matrix::Matrix;

/// Relative threshold on the squared singular-value ratio below which a
/// design is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted
/// non-increasing and eigenvectors in matching columns.
pub fn sym_eigen_desc(m: &Matrix) -> Result<(DVector<f64>, Matrix)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(TicaError::DimensionMismatch(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    let mat = faer::Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let evd = mat
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| TicaError::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let values = evd.S().column_vector();
    let vectors = evd.U();
    // faer returns ascending order
    let eigenvalues = DVector::from_fn(n, |i, _| values[n - 1 - i]);
    let eigenvectors = Matrix::from_fn(n, n, |i, j| vectors[(i, n - 1 - j)]);
    if eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(TicaError::Numerical("non-finite eigenvalue".into()));
    }
    Ok((eigenvalues, eigenvectors))
}

fn check_rank(singular_values: &DVector<f64>, what: &str) -> Result<()> {
    let max = singular_values.max();
    let min = singular_values.min();
    if !(max > 0.0) || (min / max).powi(2) < RANK_TOL {
        return Err(TicaError::RankDeficient(format!(
            "{what}: singular value ratio {:.3e}",
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    Ok(())
}

/// Least-squares solution of `design · X ≈ rhs` for a tall design of full
/// column rank, computed through a QR factorization.
pub fn lstsq(design: &Matrix, rhs: &Matrix, what: &str) -> Result<Matrix> {
    let (n, k) = design.shape();
    if rhs.nrows() != n {
        return Err(TicaError::DimensionMismatch(format!(
            "{what}: design has {n} rows, response has {}",
            rhs.nrows()
        )));
    }
    if k > n || k == 0 {
        return Err(TicaError::RankDeficient(format!(
            "{what}: {k} regressors for {n} observations"
        )));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    check_rank(&r.singular_values(), what)?;
    let qt_rhs = qr.q().transpose() * rhs;
    r.solve_upper_triangular(&qt_rhs)
        .ok_or_else(|| TicaError::RankDeficient(format!("{what}: singular triangular factor")))
}

/// Nearest matrix with orthonormal columns, `U·Vᵀ` from the thin SVD.
pub fn orthogonalize(raw: &Matrix) -> Result<Matrix> {
    if raw.ncols() > raw.nrows() {
        return Err(TicaError::Numerical(format!(
            "cannot orthonormalize {} columns in dimension {}",
            raw.ncols(),
            raw.nrows()
        )));
    }
    let svd = raw.clone().svd(true, true);
    check_rank(&svd.singular_values, "orthogonalization").map_err(|e| match e {
        TicaError::RankDeficient(msg) => TicaError::Numerical(msg),
        other => other,
    })?;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vt");
    Ok(u * v_t)
}

/// Orthonormal basis for the orthogonal complement of the column span of
/// `basis` (assumed orthonormal), with `count` columns.
pub fn orthogonal_complement(basis: &Matrix, count: usize) -> Matrix {
    let n = basis.nrows();
    let projector = Matrix::identity(n, n) - basis * basis.transpose();
    if count == 0 {
        return Matrix::zeros(n, 0);
    }
    let (_, vectors) = sym_eigen_desc(&projector).expect("projector is symmetric");
    vectors.columns(0, count).into_owned()
}

/// Cholesky factor of a symmetric positive definite matrix. On failure the
/// diagonal is bumped by `1e-10·trace/dim` and the factorization retried once.
pub fn cholesky_jitter(m: &Matrix) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch);
    }
    let n = m.nrows();
    let jitter = 1e-10 * m.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    let bumped = m + Matrix::identity(n, n) * jitter;
    bumped
        .cholesky()
        .ok_or_else(|| TicaError::Numerical("matrix is not positive definite".into()))
}

/// Log-determinant from a Cholesky factor.
pub fn chol_logdet(ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Sample skewness (biased moment ratio); zero for constant input.
pub fn skewness(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for &v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

pub fn row_vec(m: &Matrix, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}
