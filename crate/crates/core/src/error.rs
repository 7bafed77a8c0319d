use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pipeline and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid time window: {0}")]
    InvalidWindow(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("stream sequencing error: {0}")]
    Sequencing(String),

    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("invalid event stream: {0}")]
    Stream(String),

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or inconsistent input data, as
    /// opposed to bad call parameters.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Io { .. } | Error::Stream(_) | Error::Sequencing(_)
        )
    }
}
