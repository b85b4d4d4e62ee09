//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {dims:?}: {reason}")]
    Shape { dims: Vec<usize>, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
