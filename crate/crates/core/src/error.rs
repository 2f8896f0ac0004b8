use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NmtError>;

#[derive(Debug, Error)]
pub enum NmtError {
    #[error("{op}: shape mismatch {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("id {id} out of range for vocabulary of size {size}")]
    InvalidId { id: usize, size: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NmtError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NmtError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NmtError::InvalidArgument(msg.into())
    }
}
