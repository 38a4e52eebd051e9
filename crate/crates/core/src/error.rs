use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports. The CLI maps variants to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("KID subset size {subset} exceeds the {available} available samples")]
    SubsetTooLarge { subset: usize, available: usize },
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
