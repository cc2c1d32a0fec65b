use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("{path}: truncated record at byte offset {offset}")]
    Truncated { path: PathBuf, offset: usize },

    #[error("{path}: label {label} at byte offset {offset} is out of range for {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        offset: usize,
        label: usize,
        classes: usize,
    },

    #[error("{path}: bad header ({reason})")]
    BadHeader { path: PathBuf, reason: String },

    #[error("empty pool: {0}")]
    EmptyPool(&'static str),

    #[error("config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
