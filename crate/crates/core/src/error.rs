use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GemError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON on line {line}: {message}")]
    JsonLine { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("position {position} exceeds max_positions {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("zero-norm embedding (row {row})")]
    ZeroNorm { row: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("embedding failed for document {doc}: {message}")]
    EmbedFailed { doc: String, message: String },

    #[error("{0}")]
    Undefined(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GemError>;

impl GemError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GemError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GemError::InvalidArgument(msg.into())
    }
}
