use std::collections::BTreeMap;

use serde::Serialize;
use tica_core::linalg::row_vec;
use tica_core::metrics::{activation_mask, corr_activated, icc_map, mse_map, wi2c2};
use tica_core::simulation::{SimKind, TemplateChoice};
use tica_core::Matrix;

use super::fit::StatusRow;
use super::{load_template_verified, read_csv, write_csv};
use crate::error::{CliError, Result};
use crate::manifest::write_matrix_artifact;
use crate::run::*;

#[derive(Serialize)]
struct CorrelationRow {
    method: &'static str,
    t: usize,
    subject: usize,
    session: usize,
    component: usize,
    corr: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    method: &'static str,
    t: usize,
    component: usize,
    median_corr: Option<f64>,
    mean_mse: Option<f64>,
    wi2c2: Option<f64>,
}

#[derive(Serialize)]
struct QPrimeRow {
    method: &'static str,
    t: usize,
    true_q_prime: usize,
    estimated_q_prime: usize,
    subjects: usize,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn estimate_file(method: Method) -> &'static str {
    match method {
        Method::DualRegression => "sources.bin",
        _ => "template_mean.bin",
    }
}

/// Which locations enter the correlation with the truth.
fn correlation_mask(sim: SimKind, group: &[f64], subject: &[f64]) -> Vec<bool> {
    match sim {
        SimKind::A => activation_mask(group),
        SimKind::B => activation_mask(subject),
        SimKind::C | SimKind::N => vec![true; subject.len()],
    }
}

/// Scores every available fit against the ground truth and, for two-session
/// runs, against the other session.
pub fn evaluate(config: &RunConfig) -> Result<()> {
    let mut run = Run::open(config)?;
    let info = run.scenario()?;
    let t = run.stored.t_test;
    let methods: Vec<Method> = match config.method {
        Some(m) => vec![m],
        None => Method::ALL
            .into_iter()
            .filter(|&m| run.manifest.contains(&fit_status(m)))
            .collect(),
    };
    if methods.is_empty() {
        return Err(CliError::Missing {
            path: run.root.join("fits"),
            reason: "no fit results; run `tica fit` first".into(),
        });
    }
    let truth_template = load_template_verified(&run.root, TRUE_TEMPLATE_DIR, &run.manifest)?;
    let weights = match config.experiment.template {
        TemplateChoice::True => truth_template.mean.clone(),
        TemplateChoice::Estimated => load_template_verified(&run.root, ESTIMATED_TEMPLATE_DIR, &run.manifest)?.mean,
    };
    let truths: Vec<Matrix> = (0..run.stored.n_test)
        .map(|i| run.manifest.verify_matrix(&run.root, &test_sources(i)))
        .collect::<Result<_>>()?;
    let l = truth_template.l();

    let mut correlations = Vec::new();
    let mut summary = Vec::new();
    let mut q_rows = Vec::new();
    let mut outputs = Vec::new();
    for method in methods {
        let status_path = fit_status(method);
        let bytes = run.manifest.verify(&run.root, &status_path)?;
        let status: Vec<StatusRow> = read_csv(&bytes, &run.root.join(&status_path))?;
        let mut estimates: BTreeMap<(usize, usize), Matrix> = BTreeMap::new();
        for row in status.iter().filter(|r| r.ok) {
            if row.subject >= truths.len() || row.session == 0 || row.session > info.sessions {
                return Err(CliError::Config(format!(
                    "{status_path}: subject {} session {} is not part of the run",
                    row.subject, row.session
                )));
            }
            let rel = format!("{}/{}", fit_dir(method, row.subject, row.session), estimate_file(method));
            let est = run.manifest.verify_matrix(&run.root, &rel)?;
            if est.shape() != (l, info.v) {
                return Err(tica_core::TicaError::DimensionMismatch(format!("{rel} is {:?}", est.shape())).into());
            }
            estimates.insert((row.subject, row.session), est);
        }
        let skipped = status.len() - estimates.len();
        if skipped > 0 {
            log::warn!("{}: {skipped} failed fits left out", method.name());
        }

        let mut per_component = vec![Vec::new(); l];
        for (&(subject, session), est) in &estimates {
            let truth = &truths[subject];
            for (q, values) in per_component.iter_mut().enumerate() {
                let truth_row = row_vec(truth, q);
                let mask = correlation_mask(info.sim, truth_template.mean.row(q).transpose().as_slice(), &truth_row);
                let corr = corr_activated(&row_vec(est, q), &truth_row, &mask)?;
                if session == 1 {
                    values.push(corr);
                }
                correlations.push(CorrelationRow {
                    method: method.name(),
                    t,
                    subject,
                    session,
                    component: q + 1,
                    corr,
                });
            }
        }

        let first: Vec<(usize, &Matrix)> = estimates
            .iter()
            .filter(|((_, s), _)| *s == 1)
            .map(|(&(i, _), m)| (i, m))
            .collect();
        let mut mean_mse = vec![None; l];
        if first.len() >= 2 {
            let est: Vec<Matrix> = first.iter().map(|(_, m)| (*m).clone()).collect();
            let tru: Vec<Matrix> = first.iter().map(|(i, _)| truths[*i].clone()).collect();
            let mse = mse_map(&est, &tru)?;
            for (q, slot) in mean_mse.iter_mut().enumerate() {
                *slot = Some(mse.row(q).mean());
            }
            outputs.push(write_matrix_artifact(&run.root, &format!("eval/{}/mse.bin", method.name()), &mse)?);
        }

        let mut reliability = vec![None; l];
        if info.sessions == 2 {
            let paired: Vec<usize> = (0..truths.len())
                .filter(|&i| estimates.contains_key(&(i, 1)) && estimates.contains_key(&(i, 2)))
                .collect();
            if paired.len() >= 2 {
                let s1: Vec<Matrix> = paired.iter().map(|&i| estimates[&(i, 1)].clone()).collect();
                let s2: Vec<Matrix> = paired.iter().map(|&i| estimates[&(i, 2)].clone()).collect();
                let report = icc_map(&s1, &s2)?;
                for (q, w) in wi2c2(&report, &weights)?.into_iter().enumerate() {
                    reliability[q] = Some(w);
                }
                outputs.push(write_matrix_artifact(&run.root, &format!("eval/{}/icc.bin", method.name()), &report.icc)?);
            } else {
                log::warn!("{}: fewer than two subjects with both sessions; no reliability", method.name());
            }
        }

        for (q, values) in per_component.iter_mut().enumerate() {
            summary.push(SummaryRow {
                method: method.name(),
                t,
                component: q + 1,
                median_corr: median(values),
                mean_mse: mean_mse[q],
                wi2c2: reliability[q],
            });
        }

        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for row in status.iter().filter(|r| r.ok && r.session == 1) {
            if let Some(q) = row.q_prime {
                *counts.entry(q).or_default() += 1;
            }
        }
        for (estimated_q_prime, subjects) in counts {
            q_rows.push(QPrimeRow {
                method: method.name(),
                t,
                true_q_prime: info.nuisance_sources.len(),
                estimated_q_prime,
                subjects,
            });
        }
    }

    outputs.push(write_csv(
        &run.root,
        "eval/correlation.csv",
        &["method", "t", "subject", "session", "component", "corr"],
        &correlations,
    )?);
    outputs.push(write_csv(
        &run.root,
        "eval/summary.csv",
        &["method", "t", "component", "median_corr", "mean_mse", "wi2c2"],
        &summary,
    )?);
    outputs.push(write_csv(
        &run.root,
        "eval/qprime.csv",
        &["method", "t", "true_q_prime", "estimated_q_prime", "subjects"],
        &q_rows,
    )?);
    run.manifest.forget_prefix("eval");
    for (rel, digest) in outputs {
        run.manifest.insert(rel, digest);
    }
    run.save()
}
