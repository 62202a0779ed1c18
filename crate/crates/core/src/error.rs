//! Crate-wide error type.

use std::path::PathBuf;

use crate::trainer::TrainReport;

/// Errors produced by the toolkit.
///
/// `Invalid` covers configuration and input validation failures (CLI exit
/// code 2); `Diverged` signals a non-finite training loss (exit code 3) and
/// carries whatever part of the report was built before the abort.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("training diverged (non-finite loss) at {context}")]
    Diverged {
        context: String,
        partial: Option<Box<TrainReport>>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// `true` for configuration / input problems (CLI exit code 2).
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
