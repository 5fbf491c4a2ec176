//! Error types shared across the crate.

use std::path::PathBuf;

/// Errors produced by any stage of the pipeline.
///
/// The variants map onto the CLI exit codes: configuration problems exit
/// with 2, data problems (I/O, parsing, validation) with 3, and numerical
/// failures (NaN/Inf detected mid-computation) with 4.
#[derive(Debug, thiserror::Error)]
pub enum CirpError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CirpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CirpError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        CirpError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CirpError::Config(_) => 2,
            CirpError::Io { .. } | CirpError::Parse { .. } | CirpError::Validation(_) => 3,
            CirpError::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CirpError>;
