use thiserror::Error;

pub type Result<T> = std::result::Result<T, SaspError>;

#[derive(Debug, Error)]
pub enum SaspError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("gradient tape was not recorded for this result")]
    MissingTape,

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SaspError {
    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        SaspError::Shape {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        SaspError::InvalidArgument(message.into())
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        SaspError::Format {
            offset,
            message: message.into(),
        }
    }
}
