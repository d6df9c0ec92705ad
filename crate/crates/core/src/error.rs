use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("invalid dimensions {0:?}")]
    Dims(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate intensity range: min {min} equals max {max}")]
    DegenerateRange { min: f64, max: f64 },

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error("missing input {what}: {path}")]
    MissingInput { what: String, path: PathBuf },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
