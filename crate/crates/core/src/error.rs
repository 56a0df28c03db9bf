//! Error taxonomy shared by the library and the CLI exit-code contract.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-facing configuration (bad hyperparameter, unknown variant, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor/shape contract violation between internal components.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// API contract violation (precondition broken by the caller).
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed input data (labels out of range, empty split, ...).
    #[error("data error: {0}")]
    Data(String),

    /// On-disk artifact does not match its manifest.
    #[error("corruption error: {0}")]
    Corruption(String),

    /// Unsupported container/checkpoint format version.
    #[error("version error: {0}")]
    Version(String),

    /// Non-finite values reached a point where training cannot continue.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 configuration, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Contract(_) => 2,
            Error::Data(_) | Error::Corruption(_) | Error::Version(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}
