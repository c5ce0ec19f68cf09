//! Command implementations behind the `diffeo` binary.
//!
//! Every command reads all of its inputs before writing anything and returns
//! a one-line summary; the binary appends `OK` or the exit code.

pub mod commands;
pub mod experiment;
pub mod phantom;

use diffeo_core::Error;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit code; one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Io { .. } => 3,
                Error::MalformedHeader(_)
                | Error::TruncatedPayload { .. }
                | Error::BadMagic { .. }
                | Error::HeaderMismatch(_) => 4,
                Error::UnknownKey { .. }
                | Error::BadValue { .. }
                | Error::MissingKernel
                | Error::InvalidConfig(_) => 5,
                Error::InvalidGrid(_)
                | Error::GridMismatch { .. }
                | Error::InvalidData(_)
                | Error::InvalidKernel(_)
                | Error::DegeneratePartition { .. }
                | Error::MissingMomenta => 6,
                Error::NonConvergent { .. }
                | Error::NotPsd { .. }
                | Error::ResidualTooLarge { .. }
                | Error::NonFinite { .. } => 7,
            },
        }
    }
}
