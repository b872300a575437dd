//! Crate-wide error type.
//!
//! Variants map onto the process exit codes used by the command line tool:
//! configuration problems exit with 2, missing input artifacts with 3 and
//! numerical failures with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent request.
    #[error("configuration error: {0}")]
    Config(String),

    /// Shapes of two objects that must agree do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An input value is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A file exists but its contents do not match the expected format.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// A required artifact has not been produced yet.
    #[error("missing artifact {path}: run `petrecon {producer}` first")]
    MissingArtifact { path: String, producer: String },

    /// An iteration diverged or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code for the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Domain(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Format { .. } | Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
