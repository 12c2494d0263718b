//! Sufficient statistics and the M-step updates.

use nalgebra::DVector;

use crate::error::{Result, TicaError};
use crate::linalg::{cholesky_jitter, orthogonalize};
use crate::matrix::Matrix;
use crate::mog::MogParams;

/// Floor on the residual variance scale.
pub const NU0_SQ_FLOOR: f64 = 1e-10;

/// Posterior expectations summed over locations.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub n_locations: usize,
    /// `Σ_v y_v E[s_v]ᵀ`, Q×K.
    pub s_ys: Matrix,
    /// `Σ_v E[s_v s_vᵀ]`, K×K.
    pub s_ss: Matrix,
    /// `Σ_v y_vᵀ C⁻¹ y_v`.
    pub y_cinv_y: f64,
    /// `Σ_v P(z_q = m | y_v)`, Q′×M.
    pub z_prob: Matrix,
    /// `Σ_v P(z_q = m | y_v) E[s_q | z_q = m, y_v]`.
    pub z_first: Matrix,
    /// `Σ_v P(z_q = m | y_v) E[s_q² | z_q = m, y_v]`.
    pub z_second: Matrix,
}

impl SuffStats {
    pub fn zeros(q: usize, k: usize, q_prime: usize, m: usize) -> Self {
        SuffStats {
            n_locations: 0,
            s_ys: Matrix::zeros(q, k),
            s_ss: Matrix::zeros(k, k),
            y_cinv_y: 0.0,
            z_prob: Matrix::zeros(q_prime, m),
            z_first: Matrix::zeros(q_prime, m),
            z_second: Matrix::zeros(q_prime, m),
        }
    }

    pub fn merge(&mut self, other: &SuffStats) {
        self.n_locations += other.n_locations;
        self.s_ys += &other.s_ys;
        self.s_ss += &other.s_ss;
        self.y_cinv_y += other.y_cinv_y;
        self.z_prob += &other.z_prob;
        self.z_first += &other.z_first;
        self.z_second += &other.z_second;
    }
}

/// `A = S_ys S_ss⁻¹`, optionally replaced by its nearest orthonormal matrix.
pub fn update_mixing(s_ys: &Matrix, s_ss: &Matrix, orthogonalize_columns: bool) -> Result<Matrix> {
    if s_ys.ncols() != s_ss.nrows() {
        return Err(TicaError::DimensionMismatch(format!(
            "cross moments have {} columns, second moments are {}x{}",
            s_ys.ncols(),
            s_ss.nrows(),
            s_ss.ncols()
        )));
    }
    let chol = cholesky_jitter(s_ss)?;
    let raw = chol.solve(&s_ys.transpose()).transpose();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(TicaError::Numerical("non-finite mixing update".into()));
    }
    if orthogonalize_columns {
        orthogonalize(&raw)
    } else {
        Ok(raw)
    }
}

/// Residual variance scale given the updated mixing matrix `a`, averaged
/// over `V·Q` entries and floored at [`NU0_SQ_FLOOR`].
pub fn update_noise_var(stats: &SuffStats, a: &Matrix, c_diag: &DVector<f64>) -> f64 {
    let q = a.nrows();
    let mut cross = 0.0;
    let mut cinv_a = a.clone();
    for (i, mut row) in cinv_a.row_iter_mut().enumerate() {
        row /= c_diag[i];
    }
    for i in 0..q {
        for k in 0..a.ncols() {
            cross += cinv_a[(i, k)] * stats.s_ys[(i, k)];
        }
    }
    let gram = a.transpose() * cinv_a;
    let quad = gram.component_mul(&stats.s_ss).sum();
    let total = stats.y_cinv_y - 2.0 * cross + quad;
    (total / (stats.n_locations * q) as f64).max(NU0_SQ_FLOOR)
}

/// Mixture updates from the latent-state statistics. Components that lost
/// all posterior mass keep their previous mean and variance. The result is
/// re-sorted by variance so the activation component stays last.
pub fn update_mog(stats: &SuffStats, previous: &[MogParams], floors: &[f64]) -> Result<Vec<MogParams>> {
    let v = stats.n_locations as f64;
    let mut out = Vec::with_capacity(previous.len());
    for (q, prev) in previous.iter().enumerate() {
        let m = prev.m();
        let mut weights = Vec::with_capacity(m);
        let mut means = Vec::with_capacity(m);
        let mut vars = Vec::with_capacity(m);
        for c in 0..m {
            let mass = stats.z_prob[(q, c)];
            if mass > 1e-12 * v {
                let mu = stats.z_first[(q, c)] / mass;
                let var = stats.z_second[(q, c)] / mass - mu * mu;
                weights.push(mass / v);
                means.push(mu);
                vars.push(var.max(floors[q]));
            } else {
                weights.push(1e-12);
                means.push(prev.means[c]);
                vars.push(prev.vars[c]);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut params = MogParams::new(weights, means, vars)?;
        params.sort_by_variance();
        out.push(params);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen_desc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn mixing_update_is_polar_factor_of_regression() {
        for seed in 0..10 {
            let s = random(4, 50, seed);
            let y = random(4, 50, seed + 100);
            let s_ys = &y * s.transpose();
            let s_ss = &s * s.transpose();
            let raw = update_mixing(&s_ys, &s_ss, false).unwrap();
            let direct = &s_ys * s_ss.clone().try_inverse().unwrap();
            assert!((&raw - &direct).amax() < 1e-10);
            let polar = update_mixing(&s_ys, &s_ss, true).unwrap();
            let (vals, vecs) = sym_eigen_desc(&(direct.transpose() * &direct)).unwrap();
            let inv_sqrt = &vecs * Matrix::from_diagonal(&vals.map(|x| 1.0 / x.sqrt())) * vecs.transpose();
            assert!((polar - direct * inv_sqrt).amax() < 1e-9);
        }
    }

    #[test]
    fn noise_floor_applies() {
        let mut stats = SuffStats::zeros(2, 2, 0, 3);
        stats.n_locations = 5;
        let a = Matrix::identity(2, 2);
        let c = DVector::from_element(2, 1.0);
        assert_eq!(update_noise_var(&stats, &a, &c), NU0_SQ_FLOOR);
    }

    #[test]
    fn empty_component_keeps_previous_values() {
        let prev = MogParams::new(vec![0.5, 0.3, 0.2], vec![0.0, 1.0, 2.0], vec![0.1, 0.5, 2.0]).unwrap();
        let mut stats = SuffStats::zeros(1, 1, 1, 3);
        stats.n_locations = 10;
        stats.z_prob[(0, 0)] = 6.0;
        stats.z_prob[(0, 2)] = 4.0;
        stats.z_first[(0, 0)] = 0.6;
        stats.z_second[(0, 0)] = 0.6;
        stats.z_first[(0, 2)] = 8.0;
        stats.z_second[(0, 2)] = 40.0;
        let out = update_mog(&stats, &[prev], &[1e-6]).unwrap();
        let p = &out[0];
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // component 1 had no mass and keeps (1.0, 0.5)
        assert!(p.means.contains(&1.0) && p.vars.contains(&0.5));
        assert!(p.vars.windows(2).all(|w| w[0] <= w[1]));
        assert!((p.vars[2] - 6.0).abs() < 1e-12);
    }
}
