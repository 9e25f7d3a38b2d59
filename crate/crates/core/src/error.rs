use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum EadError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("alignment error: source channel `{label}` not found (target {target})")]
    Alignment { target: String, label: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("{path}: format version {found} is not supported (expected {supported})")]
    Version {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("fingerprint mismatch: checkpoint was built for {expected}, data is {found}")]
    Fingerprint { expected: String, found: String },

    #[error("gradient check failed: max relative error {max_rel_err:.3e} > {tolerance:.1e} at coordinates {offending:?}")]
    Verification {
        max_rel_err: f64,
        tolerance: f64,
        offending: Vec<usize>,
    },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EadError> = std::result::Result<T, E>;

impl EadError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EadError::Io {
            path: path.into(),
            source,
        }
    }
}
