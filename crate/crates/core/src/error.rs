//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI exit codes: `Config` -> 2, data-shaped errors
//! (`Data`, `Schema`, `UndefinedMetric`, `Checkpoint`, `Io`) -> 3,
//! `Numerical` -> 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code this error maps to when surfaced by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Schema(_)
            | Error::Data(_)
            | Error::UndefinedMetric(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint array {name}: shape {found_rows}x{found_cols} does not match expected {want_rows}x{want_cols}")]
    ShapeMismatch {
        name: String,
        found_rows: usize,
        found_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },

    #[error("checkpoint blob truncated: need {need} bytes, found {found}")]
    TruncatedBlob { need: usize, found: usize },

    #[error("checkpoint array {name} missing from manifest")]
    MissingArray { name: String },

    #[error("checkpoint manifest invalid: {0}")]
    Manifest(String),
}
