use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, lengths, indices or configuration values that cannot fit together.
    #[error("structural error: {0}")]
    Shape(String),

    /// A value outside an operation's mathematical domain (log of a
    /// non-positive number, zero-norm weight direction).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Image(#[from] ImageError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    Missing(PathBuf),

    #[error("{path}: expected 8-bit RGB, found {found}")]
    NotRgb { path: PathBuf, found: String },

    #[error("{path}: corrupt PNG stream: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("unsupported checkpoint version byte {0:#04x}")]
    Version(u8),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
