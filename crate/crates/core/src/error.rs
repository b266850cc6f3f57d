use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed dependency tree: {0}")]
    Structure(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown viewpoint {0}")]
    UnknownViewpoint(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

