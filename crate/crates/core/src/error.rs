use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {file}: {message}")]
    Format { file: String, message: String },

    #[error("duplicate id {0:?}")]
    Duplicate(String),

    #[error("unknown class name(s) in registry {registry}: {tokens:?}")]
    Registry { registry: String, tokens: Vec<String> },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch at {node}: {message}")]
    Dimension { node: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),

    #[error("no route for language {0:?}")]
    Routing(String),

    #[error("translation backend failed after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergent { epoch: usize, step: usize, loss: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dimension {
            node: node.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
