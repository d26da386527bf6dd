use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset file not found: {}", .0.display())]
    DatasetNotFound(PathBuf),

    #[error("corrupt dataset {}: truncated record at byte offset {offset}", path.display())]
    CorruptDataset { path: PathBuf, offset: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("LCA solver diverged at iteration {iteration}; retry with step <= {suggested_step}")]
    SolverDiverged { iteration: usize, suggested_step: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("incompatible dictionary: {0}")]
    IncompatibleDictionary(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
