//! Error types shared across the crate.
//!
//! Every fallible operation returns [`Result`]. Errors carry enough context
//! to identify the failing site without a debugger: dimension mismatches name
//! both shapes, singular solves name the pivot column, and file format errors
//! name the byte offset.

use thiserror::Error;

/// Unified error type for tensor ops, graph construction, propagation,
/// data handling, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape, or an operand has the wrong rank.
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    DimMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    /// An argument is outside its documented domain.
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    /// LU factorization hit a pivot below threshold; the system is singular
    /// or numerically indistinguishable from singular.
    #[error("singular matrix: pivot magnitude below {threshold:e} at column {pivot_index}")]
    Singular { pivot_index: usize, threshold: f64 },

    /// `backward` was called twice on the same tape.
    #[error("tape already consumed: backward may run at most once per tape")]
    TapeConsumed,

    /// `backward` was called on a node that is not a scalar.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// Dataset content violates an invariant (counts, shapes, split tags).
    #[error("dataset: {0}")]
    Dataset(String),

    /// A serialized artifact (dataset file or checkpoint) is malformed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Configuration text or CLI arguments are invalid.
    #[error("config: {0}")]
    Config(String),

    /// A numerical computation produced NaN/Inf or failed to converge.
    #[error("numerical: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data/format,
    /// 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArg { .. } => 1,
            Error::Dataset(_) | Error::Format { .. } | Error::Io(_) | Error::DimMismatch { .. } => {
                2
            }
            Error::Singular { .. }
            | Error::Numerical(_)
            | Error::TapeConsumed
            | Error::NonScalarLoss { .. } => 3,
        }
    }
}
