use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load record {record_id}: {message}")]
    Load { record_id: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Range { id: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("loss is undefined: {0}")]
    UndefinedLoss(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: records {record_ids:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        record_ids: Vec<String>,
    },

    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    /// Transport-level failure talking to an external provider; safe to retry.
    #[error("retryable provider error: {0}")]
    Retryable(String),

    #[error("generation client failed: {message}")]
    Generation { message: String, prompt: String },

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Input problems (bad arguments, malformed files) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Argument(_)
                | Error::Shape(_)
                | Error::Range { .. }
                | Error::Length { .. }
                | Error::Load { .. }
                | Error::Corrupt { .. }
        )
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Retryable(_))
    }
}
