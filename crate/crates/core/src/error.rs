use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("matrix file format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("non-negativity violated: {0}")]
    NonNegativity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("provider unavailable after {retries} retries: {message}")]
    ProviderUnavailable { retries: usize, message: String },

    #[error("provider error [{code}]: {message}")]
    Provider { code: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), found: found.to_string() }
    }

    pub(crate) fn format(field: &str, message: impl Into<String>) -> Self {
        Error::Format { field: field.to_string(), message: message.into() }
    }
}
