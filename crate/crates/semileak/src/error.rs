//! Crate-wide error type with process exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument values.
    #[error("config error: {0}")]
    Config(String),
    /// A pipeline stage was invoked before its prerequisites ran.
    #[error("missing stage: {0}")]
    MissingStage(String),
    /// Dataset ingestion or artifact decoding failed.
    #[error("data error: {0}")]
    Data(String),
    /// Mismatched tensor or vector dimensions.
    #[error("shape error: {0}")]
    Shape(String),
    /// Numeric contract violation (NaN, divergence, invalid posterior).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 0 success, 2 config error, 3 missing stage, 4 data error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingStage(_) => 3,
            Error::Data(_) | Error::Io(_) | Error::Serde(_) => 4,
            Error::Shape(_) | Error::Numeric(_) => 1,
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Data(msg.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_map_by_category() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::MissingStage("x".into()).exit_code(), 3);
        assert_eq!(Error::Data("x".into()).exit_code(), 4);
        assert_eq!(Error::Shape("x".into()).exit_code(), 1);
    }
}
