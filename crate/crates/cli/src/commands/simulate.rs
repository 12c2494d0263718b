use std::fs;

use rayon::prelude::*;
use tica_core::simulation::{test_seed, train_seed};
use tica_core::Matrix;

use super::save_template_artifacts;
use crate::error::{CliError, Result};
use crate::manifest::{write_artifact, write_matrix_artifact, Manifest};
use crate::run::*;

/// Draws the training and test cohorts and writes them with the ground
/// truth.
pub fn simulate(config: &RunConfig) -> Result<()> {
    let exp = &config.experiment;
    let root = config.out.as_path();
    fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    let pool = config.pool()?;
    let scenario = pool.install(|| exp.scenario())?;
    let snr = exp.snr();
    let sessions = config.sessions();
    let mut manifest = Manifest::default();

    let text = serde_json::to_string_pretty(exp).expect("config serializes") + "\n";
    let (rel, digest) = write_artifact(root, CONFIG_FILE, text.as_bytes())?;
    manifest.insert(rel, digest);

    let info = ScenarioInfo {
        sim: exp.sim,
        v: scenario.population.v(),
        template_sources: scenario.template_indices(),
        nuisance_sources: scenario.nuisance_indices(),
        sessions,
    };
    let text = serde_json::to_string_pretty(&info).expect("scenario serializes") + "\n";
    let (rel, digest) = write_artifact(root, SCENARIO_FILE, text.as_bytes())?;
    manifest.insert(rel, digest);
    save_template_artifacts(root, TRUE_TEMPLATE_DIR, &scenario.true_template(), &mut manifest)?;

    let pick = |m: &Matrix, rows: &[usize]| Matrix::from_fn(rows.len(), m.ncols(), |i, v| m[(rows[i], v)]);
    let written: Vec<Vec<(String, String)>> = pool.install(|| {
        let train = (0..exp.n_train).into_par_iter().map(|i| {
            let (_, scans) = scenario
                .subject(train_seed(exp.seed, i), exp.t_train, 1, snr)
                .map_err(|e| e.for_subject(i))?;
            log::debug!("training subject {i} simulated");
            Ok(vec![write_matrix_artifact(root, &train_scan(i), &scans[0])?])
        });
        let test = (0..exp.n_test).into_par_iter().map(|i| {
            let (sources, scans) = scenario
                .subject(test_seed(exp.seed, i), exp.t_test, sessions, snr)
                .map_err(|e| e.for_subject(i))?;
            let mut out = vec![write_matrix_artifact(root, &test_sources(i), &pick(&sources, &info.template_sources))?];
            if !info.nuisance_sources.is_empty() {
                out.push(write_matrix_artifact(root, &test_nuisance(i), &pick(&sources, &info.nuisance_sources))?);
            }
            for (s, scan) in scans.iter().enumerate() {
                out.push(write_matrix_artifact(root, &test_scan(i, s + 1), scan)?);
            }
            log::debug!("test subject {i} simulated");
            Ok(out)
        });
        train.chain(test).collect::<Result<Vec<_>>>()
    })?;
    for (rel, digest) in written.into_iter().flatten() {
        manifest.insert(rel, digest);
    }
    manifest.save(root)?;
    log::info!(
        "simulated {} training and {} test subjects into {}",
        exp.n_train,
        exp.n_test,
        root.display()
    );
    Ok(())
}
