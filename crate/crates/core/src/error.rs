use std::path::PathBuf;

use thiserror::Error;

use crate::sanitizer::TraceEntry;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures reported by external providers (encoders, slot parsers, candidate generators).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider timed out after {0} ms")]
    Timeout(u64),
    #[error("provider unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("dimension drift: declared {declared}, received {received}")]
    DimensionDrift { declared: usize, received: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate pooling: weighted patch sum is zero")]
    DegeneratePool,

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("{}: {message}", path.display())]
    Validation { path: PathBuf, message: String },

    #[error("sanitization aborted after {} accepted replacement(s): {source}", trace.len())]
    SanitizeAborted {
        trace: Vec<TraceEntry>,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: msg.into(),
        }
    }
}
