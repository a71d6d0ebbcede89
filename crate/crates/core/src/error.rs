use std::path::PathBuf;

use crate::tensor::TensorError;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Invalid geometry or sampling request (bad counts, empty frames, ...).
    #[error("{0}")]
    Geometry(String),

    /// Candidate set exhaustion during multilevel sampling, after the
    /// relaxed-radius fallback already fired.
    #[error(
        "level {level} candidate set too small: {candidates} candidates for \
         {requested} anchors in frame {frame} (radius {radius} relaxed to {relaxed_radius})"
    )]
    CandidateExhausted {
        level: usize,
        frame: usize,
        candidates: usize,
        requested: usize,
        radius: f64,
        relaxed_radius: f64,
    },

    /// Synthetic generation failure (e.g. target out of the field of view).
    #[error("{0}")]
    Generation(String),

    /// Malformed or unreadable data file.
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    /// Configuration schema violation.
    #[error("{0}")]
    Config(String),

    /// Checkpoint name/shape mismatch against the live parameter store.
    #[error("{0}")]
    Checkpoint(String),

    /// Numeric failure during training (non-finite loss, ...).
    #[error("{0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data { path: path.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
