//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Array shapes disagree where they must match.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A loss or gradient stopped being finite; carries step diagnostics.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    /// Configuration file or override problems.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint or data file problems that are not plain I/O.
    #[error("persistence error: {0}")]
    Persistence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Process exit code for the CLI: 0 ok, 2 config, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::Diverged { .. } => 3,
            Error::Io(_) | Error::Persistence(_) => 4,
            Error::ShapeMismatch(_) => 2,
        }
    }
}
