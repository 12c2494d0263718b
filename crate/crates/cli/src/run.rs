//! Run configuration and the layout of a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tica_core::simulation::{parse_experiment_config, ExperimentConfig, SimKind};

use crate::error::{CliError, Result};
use crate::manifest::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Method {
    #[value(name = "dual_regression")]
    DualRegression,
    Fast,
    Subspace,
    Exact,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::DualRegression, Method::Fast, Method::Subspace, Method::Exact];

    pub fn name(self) -> &'static str {
        match self {
            Method::DualRegression => "dual_regression",
            Method::Fast => "fast",
            Method::Subspace => "subspace",
            Method::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    /// Method to fit, or to restrict evaluation to.
    pub method: Option<Method>,
    pub out: PathBuf,
    pub threads: usize,
}

impl RunConfig {
    /// Reads the experiment config and applies the flag overrides.
    pub fn load(config: &Path, seed: Option<u64>, method: Option<Method>, out: PathBuf, threads: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(config)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config.display())))?;
        let mut experiment = parse_experiment_config(&text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(seed) = seed {
            experiment.seed = seed;
        }
        let threads = match threads {
            Some(0) => return Err(CliError::Config("--threads must be positive".into())),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(RunConfig {
            experiment,
            method,
            out,
            threads,
        })
    }

    pub fn sessions(&self) -> usize {
        if self.experiment.reliability {
            2
        } else {
            1
        }
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {} worker threads: {e}", self.threads)))
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const SCENARIO_FILE: &str = "truth/scenario.json";
pub const TRUE_TEMPLATE_DIR: &str = "truth/template";
pub const ESTIMATED_TEMPLATE_DIR: &str = "template";
pub const TEMPLATE_SUMMARY: &str = "template_summary.csv";
pub const TEMPLATE_FILES: [&str; 5] = ["meta.json", "mean.bin", "var_between.bin", "var_total.bin", "var_noise.bin"];

pub fn train_scan(i: usize) -> String {
    format!("train/subject_{i:03}/scan.bin")
}

pub fn test_scan(i: usize, session: usize) -> String {
    format!("test/subject_{i:03}/session_{session}.bin")
}

/// True maps of the template sources, in template order.
pub fn test_sources(i: usize) -> String {
    format!("test/subject_{i:03}/sources.bin")
}

pub fn test_nuisance(i: usize) -> String {
    format!("test/subject_{i:03}/nuisance.bin")
}

pub fn fits_dir(method: Method) -> String {
    format!("fits/{}", method.name())
}

pub fn fit_dir(method: Method, i: usize, session: usize) -> String {
    format!("fits/{}/subject_{i:03}/session_{session}", method.name())
}

pub fn fit_status(method: Method) -> String {
    format!("fits/{}/status.csv", method.name())
}

pub fn fit_timing(method: Method) -> String {
    format!("fits/{}/timing.csv", method.name())
}

/// Facts about the simulated population that evaluation needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioInfo {
    pub sim: SimKind,
    pub v: usize,
    pub template_sources: Vec<usize>,
    pub nuisance_sources: Vec<usize>,
    pub sessions: usize,
}

/// An existing run directory with its manifest and the config it was
/// simulated from.
pub struct Run {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub stored: ExperimentConfig,
}

impl Run {
    pub fn open(config: &RunConfig) -> Result<Self> {
        let root = config.out.clone();
        let manifest = Manifest::load(&root)?;
        let bytes = manifest.verify(&root, CONFIG_FILE)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{CONFIG_FILE} is not utf-8")))?;
        let stored = parse_experiment_config(&text).map_err(|e| CliError::Config(format!("{CONFIG_FILE}: {e}")))?;
        check_same_data(&stored, &config.experiment)?;
        Ok(Run { root, manifest, stored })
    }

    pub fn scenario(&self) -> Result<ScenarioInfo> {
        let bytes = self.manifest.verify(&self.root, SCENARIO_FILE)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{SCENARIO_FILE}: {e}")))
    }

    pub fn save(&self) -> Result<()> {
        self.manifest.save(&self.root)
    }
}

/// The fields that determine the simulated data must match the run.
fn check_same_data(stored: &ExperimentConfig, given: &ExperimentConfig) -> Result<()> {
    let fields: [(&str, bool); 10] = [
        ("sim", stored.sim == given.sim),
        ("n_train", stored.n_train == given.n_train),
        ("n_test", stored.n_test == given.n_test),
        ("t_train", stored.t_train == given.t_train),
        ("t_test", stored.t_test == given.t_test),
        ("snr", stored.snr() == given.snr()),
        ("seed", stored.seed == given.seed),
        ("var_ratio", stored.var_ratio == given.var_ratio),
        ("mc_draws", stored.mc_draws == given.mc_draws),
        ("reliability", stored.reliability == given.reliability),
    ];
    match fields.iter().find(|(_, same)| !same) {
        Some((field, _)) => Err(CliError::Config(format!(
            "{field}: differs from the config the run directory was simulated with"
        ))),
        None => Ok(()),
    }
}
