use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] lineadapt::error::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    /// Stored artefacts disagree with what they should be derived from.
    #[error("integrity failure: {0}")]
    Integrity(String),

    #[error("invalid experiment: {0}")]
    Spec(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// Integrity failures map to their own process exit code.
    pub fn is_integrity(&self) -> bool {
        use lineadapt::error::Error as E;
        matches!(self, HarnessError::Integrity(_) | HarnessError::Core(E::Checksum { .. } | E::MissingImage(_)))
    }
}
