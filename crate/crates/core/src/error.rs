use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the filtering laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical blowup at step {step}{}", member.map(|m| format!(" (member {m})")).unwrap_or_default())]
    NumericalBlowup { step: usize, member: Option<usize> },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    TrainingDivergence { epoch: usize, batch: usize },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
