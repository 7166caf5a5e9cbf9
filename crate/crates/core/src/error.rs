use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::FitResult;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{kind} index {index} out of range (len {len})")]
    Index {
        kind: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value in layer {layer}: {detail}")]
    Propagation { layer: usize, detail: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged {
        epoch: usize,
        detail: String,
        /// Best checkpoint and log up to the failure.
        partial: Box<FitResult>,
    },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad inputs rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::Config(_)
                | Error::Argument(_)
                | Error::Index { .. }
                | Error::Checkpoint(_)
                | Error::Serde(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
