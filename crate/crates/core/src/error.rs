use thiserror::Error;

/// Errors raised across the favit pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: String },

    #[error("image geometry: H={height} W={width} not divisible by P={patch}")]
    Geometry {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data format: {0}")]
    Format(String),

    #[error("accounting mismatch for {what}: analytic {analytic} vs instrumented {instrumented}")]
    Accounting {
        what: &'static str,
        analytic: u64,
        instrumented: u64,
    },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
