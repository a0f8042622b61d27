use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value {value} at index {index} in {context}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("context overflow: {requested} positions requested, limit is {limit}")]
    ContextOverflow { requested: usize, limit: usize },

    #[error("offset {offset} outside supported range 1..={k_max}")]
    OffsetOutOfRange { offset: usize, k_max: usize },

    #[error("loss function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("corpus too small: {tokens} tokens, need at least {required}")]
    CorpusTooSmall { tokens: usize, required: usize },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("checkpoint: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint: unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated while reading {what}")]
    Truncated { what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
