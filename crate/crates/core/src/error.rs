use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DfmedError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("dialogue {id}: field `{field}`: {msg}")]
    Schema { id: String, field: String, msg: String },

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DfmedError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DfmedError::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DfmedError::Shape { op, detail: detail.into() }
    }
}

pub type Result<T, E = DfmedError> = std::result::Result<T, E>;
