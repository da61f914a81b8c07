use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite result (numeric overflow)")]
    NumericOverflow { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("{path}:{line}: record {index}: field `{field}`: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        index: usize,
        field: String,
        msg: String,
    },

    #[error("sample {id}: {msg}")]
    Sample { id: String, msg: String },

    #[error("no applicable perturbation rule for {0:?}")]
    NoApplicableRule(String),

    #[error("no action verb found in {0:?}")]
    UnextractableAction(String),

    #[error("gradient supplied for frozen parameter `{0}`")]
    FreezeViolation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numeric failures (overflow, non-finite losses) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericOverflow { .. } | Error::Numeric(_))
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
