use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("invalid biography {id:?}: {message}")]
    InvalidBiography { id: String, message: String },

    #[error("no candidate evidence sentences")]
    EmptyEvidence,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("non-finite loss at update {update}: {detail}")]
    NonFiniteLoss { update: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing model variant(s): {0}")]
    MissingVariant(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
