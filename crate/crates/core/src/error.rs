use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Reasons a checkpoint container is rejected.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("header is not valid: {0}")]
    Header(String),
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateTensor(String),
    #[error("tensor {0:?} has data_offsets outside the data region")]
    OffsetsOutOfRange(String),
    #[error("tensors {0:?} and {1:?} have overlapping data_offsets")]
    Overlap(String, String),
    #[error("tensor {name:?}: buffer holds {actual} bytes but dtype and shape require {expected}")]
    LengthMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },
    #[error("tensor name {0:?} is reserved")]
    ReservedName(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}malformed checkpoint: {source}", display_prefix(.path))]
    Checkpoint {
        path: Option<PathBuf>,
        #[source]
        source: FormatError,
    },

    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("base fingerprint mismatch: task vector was computed against {expected}, got base {found}")]
    BaseMismatch { expected: String, found: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("evaluation hook failed: {0}")]
    Hook(String),
}

fn display_prefix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!("{}: ", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    /// Process exit code: 2 for I/O and container errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Checkpoint { .. } => 2,
            _ => 1,
        }
    }
}

impl From<FormatError> for Error {
    fn from(source: FormatError) -> Self {
        Error::Checkpoint { path: None, source }
    }
}
