use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: malformed header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {height}×{width} raster is too large")]
    DimensionOverflow {
        path: PathBuf,
        height: u64,
        width: u64,
    },
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("sample {path} violates an invariant: {msg}")]
    Invariant { path: PathBuf, msg: String },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;
