use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tica_core::dualreg::dual_regress;
use tica_core::em::{
    fit_exact, fit_fast, fit_subspace, save_fit, select_orders, space_size, FastOptions, FitOptions, FitResult,
    SpaceKind, StageTimings,
};
use tica_core::matrix::center_scale;
use tica_core::reduce::{prewhiten, OrderChoice};
use tica_core::seed::derive_seed;
use tica_core::simulation::{test_seed, ExperimentConfig, QPrimePolicy, TemplateChoice};
use tica_core::template::Template;
use tica_core::{Matrix, TicaError};

use super::{load_template_verified, write_csv};
use crate::error::{CliError, Result};
use crate::manifest::{sha256_hex, write_matrix_artifact};
use crate::run::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusRow {
    pub subject: usize,
    pub session: usize,
    pub ok: bool,
    pub order: Option<usize>,
    pub q_prime: Option<usize>,
    pub error: String,
}

pub const STATUS_HEADER: [&str; 6] = ["subject", "session", "ok", "order", "q_prime", "error"];

#[derive(Serialize)]
struct TimingRow {
    subject: usize,
    session: usize,
    nuisance_s: f64,
    em_s: f64,
    reestimate_s: f64,
    total_s: f64,
}

enum Fitted {
    Maps(Matrix),
    Model(FitResult),
}

struct JobOutput {
    artifacts: Vec<(String, String)>,
    order: Option<usize>,
    q_prime: Option<usize>,
    timings: StageTimings,
    total: Duration,
}

fn space_kind(method: Method) -> Option<SpaceKind> {
    match method {
        Method::Exact => Some(SpaceKind::Full),
        Method::Subspace => Some(SpaceKind::Subspace),
        _ => None,
    }
}

fn fast_options(exp: &ExperimentConfig, l: usize, seed: u64) -> FastOptions {
    let mut opts = FastOptions {
        fit: FitOptions {
            m: exp.m,
            seed,
            ..FitOptions::default()
        },
        ..FastOptions::default()
    };
    if let QPrimePolicy::Fixed(q) = exp.q_prime_policy {
        opts.order = OrderChoice::Fixed(l + q);
        opts.q_prime = Some(q);
    }
    opts
}

fn fit_scan(method: Method, x: &Matrix, template: &Template, exp: &ExperimentConfig, seed: u64) -> tica_core::Result<(Fitted, StageTimings)> {
    let l = template.l();
    match method {
        Method::DualRegression => {
            let start = Instant::now();
            let data = center_scale(x)?.data;
            let maps = dual_regress(&data, &template.mean)?.sources;
            let timings = StageTimings {
                em: start.elapsed(),
                ..StageTimings::default()
            };
            Ok((Fitted::Maps(maps), timings))
        }
        Method::Fast => {
            let fit = fit_fast(x, template, &fast_options(exp, l, seed))?;
            if fit.low_order {
                log::warn!("estimated order below L; fitted without nuisance ICs");
            }
            Ok((Fitted::Model(fit.result), fit.timings))
        }
        Method::Subspace | Method::Exact => {
            let kind = space_kind(method).expect("mixture method");
            let start = Instant::now();
            let opts = fast_options(exp, l, seed);
            let q_prime = match exp.q_prime_policy {
                QPrimePolicy::Fixed(q) => q,
                QPrimePolicy::Estimate => select_orders(x, template, &opts)?.q_prime,
            };
            check_space(q_prime, exp.m, kind, opts.fit.space_cap)?;
            let data = center_scale(x)?.data;
            let reduced = prewhiten(&data, OrderChoice::Fixed(l + q_prime))?;
            let nuisance = start.elapsed();
            let em_start = Instant::now();
            let fit = match kind {
                SpaceKind::Full => fit_exact(&reduced, template, q_prime, &opts.fit)?,
                SpaceKind::Subspace => fit_subspace(&reduced, template, q_prime, &opts.fit)?,
            };
            let timings = StageTimings {
                nuisance,
                em: em_start.elapsed(),
                reestimate: Duration::ZERO,
            };
            Ok((Fitted::Model(fit), timings))
        }
    }
}

fn check_space(q_prime: usize, m: usize, kind: SpaceKind, cap: u64) -> tica_core::Result<()> {
    let count = space_size(q_prime, m, kind);
    if count > cap as u128 {
        return Err(TicaError::SpaceTooLarge { count, cap });
    }
    Ok(())
}

fn fit_job(
    run: &Run,
    method: Method,
    template: &Template,
    exp: &ExperimentConfig,
    subject: usize,
    session: usize,
) -> Result<JobOutput> {
    let start = Instant::now();
    let x = run.manifest.verify_matrix(&run.root, &test_scan(subject, session))?;
    let seed = derive_seed(test_seed(exp.seed, subject), 100 + session as u64);
    let (fitted, timings) = fit_scan(method, &x, template, exp, seed).map_err(|e| e.for_subject(subject))?;
    let dir = fit_dir(method, subject, session);
    let (artifacts, order, q_prime) = match fitted {
        Fitted::Maps(maps) => (vec![write_matrix_artifact(&run.root, &format!("{dir}/sources.bin"), &maps)?], None, None),
        Fitted::Model(fit) => {
            save_fit(&fit, run.root.join(&dir))?;
            let mut files = vec!["meta.json", "template_mean.bin", "template_var.bin"];
            if fit.nuisance_mean.is_some() {
                files.push("nuisance_mean.bin");
            }
            let artifacts = files
                .iter()
                .map(|name| hash_file(&run.root, &format!("{dir}/{name}")))
                .collect::<Result<Vec<_>>>()?;
            (artifacts, Some(fit.order), Some(fit.q_prime))
        }
    };
    Ok(JobOutput {
        artifacts,
        order,
        q_prime,
        timings,
        total: start.elapsed(),
    })
}

fn hash_file(root: &Path, rel: &str) -> Result<(String, String)> {
    let path = root.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    Ok((rel.to_string(), sha256_hex(&bytes)))
}

/// Fits every test scan with one method. A failing subject is logged and
/// marked in `status.csv`; the rest of the cohort still runs.
pub fn fit(config: &RunConfig) -> Result<()> {
    let method = config.method.unwrap_or(Method::Fast);
    let exp = &config.experiment;
    let mut run = Run::open(config)?;
    if let (Some(kind), QPrimePolicy::Fixed(q)) = (space_kind(method), exp.q_prime_policy) {
        check_space(q, exp.m, kind, FitOptions::default().space_cap)?;
    }
    let template_dir = match exp.template {
        TemplateChoice::True => TRUE_TEMPLATE_DIR,
        TemplateChoice::Estimated => ESTIMATED_TEMPLATE_DIR,
    };
    let template = load_template_verified(&run.root, template_dir, &run.manifest)?;
    let pool = config.pool()?;
    let jobs: Vec<(usize, usize)> = (0..run.stored.n_test)
        .flat_map(|i| (1..=config.sessions()).map(move |s| (i, s)))
        .collect();
    let outputs: Vec<Result<JobOutput>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, s)| {
                let out = fit_job(&run, method, &template, exp, i, s);
                match &out {
                    Ok(_) => log::info!("{} fit of subject {i} session {s} done", method.name()),
                    Err(e) => log::error!("{} fit of subject {i} session {s} failed: {e}", method.name()),
                }
                out
            })
            .collect()
    });

    run.manifest.forget_prefix(&fits_dir(method));
    let mut status = Vec::with_capacity(jobs.len());
    let mut timing = Vec::new();
    let mut first_error = None;
    for (&(subject, session), out) in jobs.iter().zip(outputs) {
        match out {
            Ok(out) => {
                for (rel, digest) in out.artifacts {
                    run.manifest.insert(rel, digest);
                }
                status.push(StatusRow {
                    subject,
                    session,
                    ok: true,
                    order: out.order,
                    q_prime: out.q_prime,
                    error: String::new(),
                });
                timing.push(TimingRow {
                    subject,
                    session,
                    nuisance_s: out.timings.nuisance.as_secs_f64(),
                    em_s: out.timings.em.as_secs_f64(),
                    reestimate_s: out.timings.reestimate.as_secs_f64(),
                    total_s: out.total.as_secs_f64(),
                });
            }
            Err(e) => {
                status.push(StatusRow {
                    subject,
                    session,
                    ok: false,
                    order: None,
                    q_prime: None,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    let (rel, digest) = write_csv(&run.root, &fit_status(method), &STATUS_HEADER, &status)?;
    run.manifest.insert(rel, digest);
    // Wall-clock times differ between runs, so the table stays out of the
    // manifest.
    write_csv(
        &run.root,
        &fit_timing(method),
        &["subject", "session", "nuisance_s", "em_s", "reestimate_s", "total_s"],
        &timing,
    )?;
    run.save()?;
    let failed = status.iter().filter(|r| !r.ok).count();
    match first_error {
        Some(e) if failed == status.len() => Err(e),
        _ => {
            if failed > 0 {
                log::warn!("{failed} of {} fits failed; see {}", status.len(), fit_status(method));
            }
            Ok(())
        }
    }
}
