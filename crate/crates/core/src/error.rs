use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric fault in layer `{layer}`: non-finite value")]
    Numeric { layer: String },

    #[error("crop required: {height}x{width} is not divisible by 8")]
    CropRequired { height: usize, width: usize },

    #[error("missing pair for stem `{stem}`")]
    MissingPair { stem: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },

    #[error("parameter names mismatch: missing [{}], unexpected [{}]", missing.join(", "), unexpected.join(", "))]
    NameMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("optimizer error: {0}")]
    Optimizer(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
