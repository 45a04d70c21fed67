use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid user-supplied configuration (bad flag, bad hyperparameter).
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    /// The batch sampler could not produce a batch with a contrastive positive.
    #[error("sampler error: {0}")]
    Sampler(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("schema error in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found at {0}")]
    Missing(PathBuf),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("shape mismatch for {name}: manifest {manifest:?}, model {model:?}")]
    ShapeMismatch {
        name: String,
        manifest: Vec<usize>,
        model: Vec<usize>,
    },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
