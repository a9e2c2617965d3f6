use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("codepoint {ch:?} (U+{code:04X}) is not in the charset", code = *.ch as u32)]
    UnknownCodepoint { ch: char },

    #[error("transcript contains out-of-charset codepoints: {0:?}")]
    OutOfCharset(Vec<char>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("writer {writer}: pool has {available} lines, {needed} required")]
    InsufficientPool { writer: u32, needed: usize, available: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("image file missing: {0}")]
    MissingImage(PathBuf),

    #[error("integrity error for {path}: expected sha256 {expected}, found {actual}")]
    Checksum { path: PathBuf, expected: String, actual: String },

    #[error("image codec error: {0}")]
    Image(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("component mask selects no parameter groups")]
    EmptyMask,

    #[error("reference set is empty")]
    EmptyReferenceSet,

    #[error("baseline CER is zero for writer {writer}; relative improvement undefined")]
    ZeroBaseline { writer: u32 },

    #[error("results grid incomplete: {0}")]
    IncompleteGrid(String),

    #[error("criterion {0} is an oracle and cannot be used without a test set")]
    OracleOnly(String),

    #[error("scale factor must be positive, got {0}")]
    BadScaleFactor(f64),

    #[error("trace error: {0}")]
    Trace(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
