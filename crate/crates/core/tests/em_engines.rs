use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tica_core::em::{
    cond_posterior_s, e_step, enumerate_space, fast_em_core, fit_exact, fit_subspace, load_fit,
    posterior_moments, posterior_z, save_fit, update_mixing, update_mog, update_noise_var,
    FitOptions, PreparedTemplate, SpaceKind, SuffStats, TemplateSlice,
};
use tica_core::linalg::{pearson, row_vec};
use tica_core::Matrix;

mod common;

use common::*;

#[test]
fn posterior_z_matches_direct_marginals() {
    let p = problem(2, 2, 20, 0.3, 1);
    let prior = PreparedTemplate::new(&p.template).unwrap();
    let theta = random_theta(2, 2, 2);
    let space = enumerate_space(2, 3, SpaceKind::Full).unwrap();
    let c = p.reduced.c_diag.as_slice();
    for col in 0..20 {
        let y: Vec<f64> = p.reduced.y.column(col).iter().copied().collect();
        let (mean, var) = slice_at(&prior, col);
        let slice = TemplateSlice { mean: &mean, var: &var };
        let got = posterior_z(&y, c, &theta, slice, &space).unwrap();
        let weights: Vec<f64> = space
            .iter()
            .map(|z| naive_log_weight(&y, c, &theta, slice, z).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        for (g, w) in got.iter().zip(&weights) {
            assert!((g - w / total).abs() < 1e-10, "{g} vs {}", w / total);
        }
        let pm = posterior_moments(&y, c, &theta, slice, &space).unwrap();
        assert!((pm.log_evidence - total.ln()).abs() < 1e-9 * total.ln().abs().max(1.0));
    }
}

#[test]
fn moments_match_mixture_of_conditionals() {
    let p = problem(1, 2, 10, 0.3, 3);
    let prior = PreparedTemplate::new(&p.template).unwrap();
    let theta = random_theta(1, 2, 4);
    let c = p.reduced.c_diag.as_slice();
    for kind in [SpaceKind::Full, SpaceKind::Subspace] {
        let space = enumerate_space(2, 3, kind).unwrap();
        for col in 0..10 {
            let y: Vec<f64> = p.reduced.y.column(col).iter().copied().collect();
            let (mean, var) = slice_at(&prior, col);
            let slice = TemplateSlice { mean: &mean, var: &var };
            let raw: Vec<f64> = space.iter().map(|z| naive_log_weight(&y, c, &theta, slice, z).exp()).collect();
            let total: f64 = raw.iter().sum();
            let mut e_s = DVector::zeros(3);
            let mut e_ss = Matrix::zeros(3, 3);
            let mut z_prob = Matrix::zeros(2, 3);
            let mut z_first = Matrix::zeros(2, 3);
            for (z, w) in space.iter().zip(&raw) {
                let w = w / total;
                let (mu, cov) = naive_conditional(&y, c, &theta, slice, z);
                let (mu_fast, cov_fast) = cond_posterior_s(&y, c, &theta, slice, z).unwrap();
                assert!((&mu - mu_fast).amax() < 1e-10);
                assert!((&cov - cov_fast).amax() < 1e-10);
                e_s += &mu * w;
                e_ss += (cov + &mu * mu.transpose()) * w;
                for j in 0..2 {
                    z_prob[(j, z[j] as usize)] += w;
                    z_first[(j, z[j] as usize)] += w * mu[1 + j];
                }
            }
            let pm = posterior_moments(&y, c, &theta, slice, &space).unwrap();
            assert_eq!(pm.n_configs, space.len());
            assert!((pm.mean - e_s).amax() < 1e-10);
            assert!((pm.second - e_ss).amax() < 1e-10);
            assert!((pm.z_prob - z_prob).amax() < 1e-10);
            assert!((pm.z_first - z_first).amax() < 1e-10);
        }
    }
}

#[test]
fn noise_update_matches_expected_residual() {
    let p = problem(2, 1, 60, 0.3, 5);
    let prior = PreparedTemplate::new(&p.template).unwrap();
    let theta = random_theta(2, 1, 6);
    let space = enumerate_space(1, 3, SpaceKind::Full).unwrap();
    let c = p.reduced.c_diag.as_slice();
    let out = e_step(&p.reduced.y, c, &theta, &prior, &space).unwrap();
    let a_new = update_mixing(&out.stats.s_ys, &out.stats.s_ss, false).unwrap();
    let got = update_noise_var(&out.stats, &a_new, &p.reduced.c_diag);
    // E[(y − As)ᵀC⁻¹(y − As)] = tr(C⁻¹[(y − Aμ)(y − Aμ)ᵀ + A Σ Aᵀ])
    let cinv = Matrix::from_diagonal(&p.reduced.c_diag.map(|x| 1.0 / x));
    let mut total = 0.0;
    for col in 0..60 {
        let y: Vec<f64> = p.reduced.y.column(col).iter().copied().collect();
        let (mean, var) = slice_at(&prior, col);
        let pm = posterior_moments(&y, c, &theta, TemplateSlice { mean: &mean, var: &var }, &space).unwrap();
        let r = DVector::from_column_slice(&y) - &a_new * &pm.mean;
        let outer = &r * r.transpose() + &a_new * pm.covariance() * a_new.transpose();
        total += (&cinv * outer).trace();
    }
    let expected = total / (60.0 * 3.0);
    assert!((got - expected).abs() < 1e-10 * expected, "{got} vs {expected}");
}

#[test]
fn mixture_update_matches_direct_responsibilities() {
    let p = problem(1, 2, 80, 0.3, 7);
    let prior = PreparedTemplate::new(&p.template).unwrap();
    let theta = random_theta(1, 2, 8);
    let space = enumerate_space(2, 3, SpaceKind::Full).unwrap();
    let c = p.reduced.c_diag.as_slice();
    let out = e_step(&p.reduced.y, c, &theta, &prior, &space).unwrap();
    let updated = update_mog(&out.stats, &theta.mog, &[1e-8, 1e-8]).unwrap();
    for j in 0..2 {
        let (mut n, mut s1, mut s2) = ([0.0; 3], [0.0; 3], [0.0; 3]);
        for col in 0..80 {
            let y: Vec<f64> = p.reduced.y.column(col).iter().copied().collect();
            let (mean, var) = slice_at(&prior, col);
            let slice = TemplateSlice { mean: &mean, var: &var };
            let raw: Vec<f64> = space.iter().map(|z| naive_log_weight(&y, c, &theta, slice, z).exp()).collect();
            let total: f64 = raw.iter().sum();
            for (z, w) in space.iter().zip(&raw) {
                let w = w / total;
                let (mu, cov) = naive_conditional(&y, c, &theta, slice, z);
                let lab = z[j] as usize;
                n[lab] += w;
                s1[lab] += w * mu[1 + j];
                s2[lab] += w * (cov[(1 + j, 1 + j)] + mu[1 + j] * mu[1 + j]);
            }
        }
        let mut expected: Vec<(f64, f64, f64)> = (0..3)
            .map(|m| {
                let mu = s1[m] / n[m];
                (n[m] / 80.0, mu, s2[m] / n[m] - mu * mu)
            })
            .collect();
        expected.sort_by(|a, b| a.2.total_cmp(&b.2));
        for (m, (w, mu, var)) in expected.into_iter().enumerate() {
            assert!((updated[j].weights[m] - w).abs() < 1e-9);
            assert!((updated[j].means[m] - mu).abs() < 1e-9);
            assert!((updated[j].vars[m] - var).abs() < 1e-9);
        }
    }
}

#[test]
fn subspace_equals_exact_for_one_nuisance_source() {
    let p = problem(2, 1, 150, 0.2, 9);
    let opts = FitOptions { max_iters: 15, ..FitOptions::default() };
    let exact = fit_exact(&p.reduced, &p.template, 1, &opts).unwrap();
    let sub = fit_subspace(&p.reduced, &p.template, 1, &opts).unwrap();
    assert_eq!(exact.n_iters, sub.n_iters);
    assert!((exact.template_mean - sub.template_mean).amax() < 1e-10);
    assert!((exact.template_var - sub.template_var).amax() < 1e-10);
    assert!((exact.theta.nu0_sq - sub.theta.nu0_sq).abs() < 1e-10);
    assert!((exact.theta.mixing() - sub.theta.mixing()).amax() < 1e-10);
}

#[test]
fn exact_without_nuisance_equals_gaussian_core() {
    let p = problem(3, 0, 200, 0.2, 10);
    let opts = FitOptions::default();
    let exact = fit_exact(&p.reduced, &p.template, 0, &opts).unwrap();
    let core = fast_em_core(&p.reduced, &p.template, &opts).unwrap();
    assert_eq!(exact.n_iters, core.n_iters);
    assert!((exact.template_mean - &core.template_mean).amax() < 1e-8);
    assert!((exact.template_var - &core.template_var).amax() < 1e-8);
    assert!((exact.theta.nu0_sq - core.theta.nu0_sq).abs() < 1e-8);
    for (a, b) in exact.loglik_trace.iter().zip(&core.loglik_trace) {
        assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
    }
    assert!(core.converged);
}

#[test]
fn exact_em_likelihood_is_monotone() {
    let p = problem(2, 2, 300, 0.3, 11);
    let opts = FitOptions {
        orthogonalize: false,
        max_iters: 40,
        ..FitOptions::default()
    };
    let fit = fit_exact(&p.reduced, &p.template, 2, &opts).unwrap();
    assert!(fit.loglik_trace.len() >= 3);
    for w in fit.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} then {}", w[0], w[1]);
    }
}

#[test]
fn exact_fit_recovers_subject_sources() {
    let p = problem(2, 2, 400, 0.1, 12);
    let fit = fit_exact(&p.reduced, &p.template, 2, &FitOptions::default()).unwrap();
    for q in 0..2 {
        let r = pearson(&row_vec(&fit.template_mean, q), &row_vec(&p.truth, q));
        assert!(r > 0.9, "component {q}: r = {r}");
    }
    assert!(fit.template_var.iter().all(|&x| x >= 0.0));
    assert_eq!(fit.nuisance_mean.as_ref().unwrap().shape(), (2, 400));
}

#[test]
fn e_step_is_independent_of_thread_count() {
    let p = problem(2, 2, 700, 0.3, 13);
    let prior = PreparedTemplate::new(&p.template).unwrap();
    let theta = random_theta(2, 2, 14);
    let space = enumerate_space(2, 3, SpaceKind::Subspace).unwrap();
    let c = p.reduced.c_diag.as_slice();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| e_step(&p.reduced.y, c, &theta, &prior, &space).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.mean, four.mean);
    assert_eq!(one.stats, four.stats);
    assert_eq!(one.loglik.to_bits(), four.loglik.to_bits());
}

#[test]
fn mismatched_order_is_rejected() {
    let p = problem(2, 2, 50, 0.3, 15);
    assert!(fit_exact(&p.reduced, &p.template, 1, &FitOptions::default()).is_err());
}

#[test]
fn stored_fit_round_trip() {
    let p = problem(2, 1, 80, 0.2, 16);
    let fit = fit_subspace(&p.reduced, &p.template, 1, &FitOptions { max_iters: 3, ..FitOptions::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_fit(&fit, dir.path()).unwrap();
    let stored = load_fit(dir.path()).unwrap();
    assert_eq!(stored.meta, fit.meta());
    assert_eq!(stored.template_mean, fit.template_mean);
    assert_eq!(stored.template_var, fit.template_var);
    assert_eq!(stored.nuisance_mean, fit.nuisance_mean);
}

#[test]
fn suff_stats_merge_adds() {
    let mut a = SuffStats::zeros(2, 2, 1, 3);
    a.n_locations = 2;
    a.y_cinv_y = 1.5;
    let b = a.clone();
    a.merge(&b);
    assert_eq!(a.n_locations, 4);
    assert_eq!(a.y_cinv_y, 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn posterior_probabilities_are_a_distribution(seed in 0u64..10_000, col in 0usize..10) {
        let p = problem(1, 2, 10, 0.3, seed);
        let prior = PreparedTemplate::new(&p.template).unwrap();
        let theta = random_theta(1, 2, seed + 1);
        let space = enumerate_space(2, 3, SpaceKind::Subspace).unwrap();
        let y: Vec<f64> = p.reduced.y.column(col).iter().copied().collect();
        let (mean, var) = slice_at(&prior, col);
        let slice = TemplateSlice { mean: &mean, var: &var };
        let probs = posterior_z(&y, p.reduced.c_diag.as_slice(), &theta, slice, &space).unwrap();
        prop_assert!(probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pm = posterior_moments(&y, p.reduced.c_diag.as_slice(), &theta, slice, &space).unwrap();
        let cov = pm.covariance();
        let eig = nalgebra::SymmetricEigen::new((&cov + cov.transpose()) * 0.5).eigenvalues;
        prop_assert!(eig.iter().all(|&x| x > -1e-10));
        for j in 0..2 {
            prop_assert!((pm.z_prob.row(j).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonalized_update_has_orthonormal_columns(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = gaussian(3, 30, &mut rng);
        let y = gaussian(5, 30, &mut rng);
        let a = update_mixing(&(&y * s.transpose()), &(&s * s.transpose()), true).unwrap();
        prop_assert!((a.transpose() * &a - Matrix::identity(3, 3)).amax() < 1e-10);
    }
}
