use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("age {age} outside label range 0..={max}")]
    AgeOutOfRange { age: i64, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("distribution is not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("infinite KL divergence: p[{index}] = 0 where q[{index}] > 0")]
    InfiniteKl { index: usize },

    #[error("invalid bounding box {bbox:?} for image {width}x{height}")]
    BadBbox {
        bbox: [f64; 4],
        width: usize,
        height: usize,
    },

    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate variance: every paired difference equals {0}")]
    DegenerateVariance(f64),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("unknown subject {0}")]
    UnknownSubject(String),

    #[error("invalid decision: {0}")]
    InvalidDecision(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
