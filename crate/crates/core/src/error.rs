//! Error types shared across the crate.

use thiserror::Error;

/// All failure modes surfaced by the library.
///
/// The CLI maps these onto process exit codes: configuration and usage
/// problems exit 1, data/format problems exit 2, numerical aborts exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Index or slice range outside the valid extent.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// A caller violated an API contract (wrong layer shape, mismatched
    /// latent length, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset-level problem (label out of range, count mismatch, ...).
    #[error("data error: {0}")]
    Data(String),

    /// On-disk format problem (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// API misuse that is not a shape problem (double backward, non-scalar
    /// root, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite value and aborted.
    #[error("numerical abort: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Contract(_) | Error::Dim(_) | Error::Bounds(_) => 1,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
