use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FdnnError> = std::result::Result<T, E>;

/// Errors raised while parsing a binary PPM file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PpmError {
    #[error("unsupported magic {0:?}, expected \"P6\"")]
    UnsupportedMagic(String),
    #[error("unsupported maxval {0}, expected 255")]
    UnsupportedMaxval(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Errors raised while loading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"FDNN\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("version mismatch: file has version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum FdnnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Ppm {
        path: PathBuf,
        #[source]
        source: PpmError,
    },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl FdnnError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FdnnError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FdnnError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FdnnError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FdnnError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: 2 config/usage, 3 I/O and file formats, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            FdnnError::Shape(_) | FdnnError::Domain(_) | FdnnError::Config(_) | FdnnError::State(_) => 2,
            FdnnError::Io { .. } | FdnnError::Ppm { .. } | FdnnError::Checkpoint { .. } | FdnnError::Json(_) => 3,
            FdnnError::NonFinite(_) => 4,
        }
    }
}
