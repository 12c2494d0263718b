use rayon::prelude::*;
use serde::Serialize;
use tica_core::linalg::{pearson, row_vec};
use tica_core::template::{build_template as estimate_template, SplitMode, SubjectScans};

use super::{load_template_verified, save_template_artifacts, write_csv};
use crate::error::Result;
use crate::run::*;

#[derive(Serialize)]
struct SummaryRow {
    component: usize,
    mean_corr: f64,
    var_corr: f64,
}

/// Estimates the template from the training cohort and compares it with
/// the true template.
pub fn build_template(config: &RunConfig) -> Result<()> {
    let mut run = Run::open(config)?;
    let pool = config.pool()?;
    let truth = load_template_verified(&run.root, TRUE_TEMPLATE_DIR, &run.manifest)?;
    let cohort = pool.install(|| {
        (0..run.stored.n_train)
            .into_par_iter()
            .map(|i| {
                Ok(SubjectScans {
                    scans: vec![run.manifest.verify_matrix(&run.root, &train_scan(i))?],
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let template = pool.install(|| estimate_template(&cohort, &truth.mean, SplitMode::Halve))?;

    run.manifest.forget_prefix(ESTIMATED_TEMPLATE_DIR);
    save_template_artifacts(&run.root, ESTIMATED_TEMPLATE_DIR, &template, &mut run.manifest)?;
    let rows: Vec<SummaryRow> = (0..template.l())
        .map(|q| SummaryRow {
            component: q + 1,
            mean_corr: pearson(&row_vec(&template.mean, q), &row_vec(&truth.mean, q)),
            var_corr: pearson(&row_vec(&template.var_between, q), &row_vec(&truth.var_between, q)),
        })
        .collect();
    for row in &rows {
        log::info!(
            "component {}: mean r = {:.4}, variance r = {:.4}",
            row.component,
            row.mean_corr,
            row.var_corr
        );
    }
    let (rel, digest) = write_csv(&run.root, TEMPLATE_SUMMARY, &["component", "mean_corr", "var_corr"], &rows)?;
    run.manifest.insert(rel, digest);
    run.save()
}
