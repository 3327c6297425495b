use thiserror::Error;

/// Errors raised anywhere in the grouping pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// The input could not be decoded. `field` names the offending location when known.
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("validation error at `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("unknown cluster id {0}")]
    UnknownCluster(usize),

    #[error("contradictory user constraints on pair ({0}, {1})")]
    Contradiction(u64, u64),

    #[error("layout overflow: {0}")]
    LayoutOverflow(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than internal failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::DimensionMismatch { .. }
                | Error::UnknownCluster(_)
                | Error::Contradiction(..)
                | Error::LayoutOverflow(_)
                | Error::Checkpoint(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        // serde_json messages already carry the field name and position.
        Error::parse(
            format!("line {} column {}", err.line(), err.column()),
            err.to_string(),
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
