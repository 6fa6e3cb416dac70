use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or hyperparameter.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid argument to an operation (empty batch, out-of-range score, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite value produced during a computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation requires a model mode that the given parameters do not have.
    #[error("mode error: {0}")]
    Mode(String),

    /// Array shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Divergence {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
