use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the physical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed to converge or lost accuracy.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Inconsistent or invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A requested frequency is not covered by the available data.
    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
