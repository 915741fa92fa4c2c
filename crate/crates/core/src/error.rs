//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("unknown phantom kind `{0}` (expected cube, ellipsoids or knee_toy)")]
    UnknownKind(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite {term} loss at step {step}: {value}")]
    NanLoss {
        step: usize,
        term: &'static str,
        value: f64,
    },

    #[error("no view at theta {theta} deg in the reference stack")]
    MissingAngle { theta: f64 },

    #[error("png error: {0}")]
    Png(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}
