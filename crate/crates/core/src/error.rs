use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the matching engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("inversion did not converge: last update {last_update:.3e} after {iterations} iterations")]
    NonConvergent { iterations: usize, last_update: f64 },

    #[error("kernel is not positive semidefinite: <p, Kp> = {value:.3e} (|p|^2 = {norm_sq:.3e})")]
    NotPsd { value: f64, norm_sq: f64 },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("degenerate partition: weight sum {sum:.3e} at pixel ({i}, {j})")]
    DegeneratePartition { i: usize, j: usize, sum: f64 },

    #[error("correspondence residual too large: {residual_px:.3} px")]
    ResidualTooLarge { residual_px: f64 },

    #[error("path energy needs the generating momenta")]
    MissingMomenta,

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },

    #[error("configuration has no kernel block")]
    MissingKernel,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
