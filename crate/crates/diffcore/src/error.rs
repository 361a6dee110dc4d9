use thiserror::Error;

/// Errors raised by tensor construction, tape ops, the optimizer and
/// checkpoint I/O. Shape errors always name the offending dimension.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered ({detail})")]
    NonFinite { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("parameter store: {0}")]
    ParamStore(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;

impl DiffError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::NonFinite {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
