use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A loss or gradient went non-finite. `seed` identifies the batch so the
    /// step can be replayed.
    #[error("numerical failure at iteration {iteration} (batch seed {seed}): {message}")]
    Numerical {
        iteration: u64,
        seed: u64,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed annotation file {path}: bad records at lines {lines:?}")]
    MalformedAnnotations { path: PathBuf, lines: Vec<usize> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
