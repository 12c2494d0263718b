use std::io;
use std::path::PathBuf;

use thiserror::Error;
use tica_core::TicaError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: {reason}", path.display())]
    Missing { path: PathBuf, reason: String },

    #[error("artifact {} does not match its manifest checksum", .0.display())]
    Tampered(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("csv error on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Core(#[from] TicaError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        let path = path.into();
        if source.kind() == io::ErrorKind::NotFound {
            CliError::Missing {
                path,
                reason: "not found".into(),
            }
        } else {
            CliError::Io { path, source }
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } | CliError::Tampered(_) => 4,
            CliError::Io { .. } | CliError::Csv { .. } => 1,
            CliError::Core(e) => match e.root() {
                TicaError::Format(_) | TicaError::SpaceTooLarge { .. } => 2,
                TicaError::DegenerateInput(_)
                | TicaError::RankDeficient(_)
                | TicaError::InconsistentCohort(_)
                | TicaError::DimensionMismatch(_)
                | TicaError::PerturbationOutOfGrid { .. } => 3,
                TicaError::Numerical(_) => 5,
                TicaError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => 4,
                _ => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
