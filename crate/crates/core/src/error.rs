use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum TicaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("inconsistent cohort: {0}")]
    InconsistentCohort(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("latent space has {count} configurations, above the cap of {cap}")]
    SpaceTooLarge { count: u128, cap: u64 },

    #[error("perturbed source centre left the grid after {attempts} attempts")]
    PerturbationOutOfGrid { attempts: usize },

    #[error("subject {subject}: {source}")]
    Subject {
        subject: usize,
        #[source]
        source: Box<TicaError>,
    },
}

impl TicaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TicaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the subject it came from.
    pub fn for_subject(self, subject: usize) -> Self {
        TicaError::Subject {
            subject,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through subject tags.
    pub fn root(&self) -> &TicaError {
        match self {
            TicaError::Subject { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, TicaError>;
