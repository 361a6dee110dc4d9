use thiserror::Error;

#[derive(Debug, Error)]
pub enum AvError {
    #[error("config: {0}")]
    Config(String),

    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, AvError>;

impl AvError {
    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        AvError::Invalid {
            op,
            detail: detail.into(),
        }
    }
}
