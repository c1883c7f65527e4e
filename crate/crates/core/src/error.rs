use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("model construction error at layer {layer}: {msg}")]
    Construction { layer: usize, msg: String },

    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("scheme capacity error: class {class} does not fit an n-hot embedding of dimension {dim}")]
    SchemeCapacity { class: usize, dim: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {what} is not finite")]
    Divergence {
        epoch: usize,
        batch: usize,
        what: &'static str,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("corrupted model file: {0}")]
    Corruption(String),

    #[error("unsupported model file version: {0}")]
    Version(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
