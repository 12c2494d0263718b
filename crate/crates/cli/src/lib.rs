//! Experiment runner: simulate cohorts, build templates, fit subjects and
//! score the fits, all inside one checksummed run directory.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod run;

pub use error::{CliError, Result};
pub use run::{Method, RunConfig};
