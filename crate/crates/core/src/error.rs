use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("caption generation failed: {0}")]
    Generation(String),

    #[error("unsupported format version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },

    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("training aborted: {reason} (diagnostics in {dump:?})")]
    TrainingAborted { reason: String, dump: Option<PathBuf> },

    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Process exit code for the error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Spec(_) | Error::Config(_) => 2,
            Error::Io { .. } | Error::Missing { .. } => 3,
            Error::Version { .. } | Error::Integrity { .. } | Error::Json { .. } => 4,
            Error::TrainingAborted { .. } | Error::NonFinite(_) | Error::Numeric(_) => 5,
            Error::Generation(_)
            | Error::EmptyInput(_)
            | Error::EmptyMask
            | Error::Shape(_) => 6,
        }
    }
}
