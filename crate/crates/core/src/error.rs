//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree; names the offending axes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is outside its allowed range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Input data carries out-of-range values (e.g. unknown mask labels).
    #[error("data error: {0}")]
    Data(String),

    /// Reading or writing an archive failed.
    #[error("persistence error: {0}")]
    Persistence(String),

    /// An archive's bytes do not decode as the expected container.
    #[error("parse error: {0}")]
    Parse(String),

    /// Training diverged or produced non-finite values.
    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    /// Test-split data reached a training-only path. Hard failure.
    #[error("leakage error: {0}")]
    Leakage(String),

    /// A retrieval query could not be answered.
    #[error("retrieval error: {0}")]
    Retrieval(String),

    /// A metric has no defined value for the given inputs; reported as
    /// absent, never as a sentinel number.
    #[error("not computable: {0}")]
    NotComputable(String),

    /// A frozen component was mutated. Hard failure.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
