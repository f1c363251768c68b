//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition on an argument failed.
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    /// Logarithm of a non-positive value.
    #[error("log of non-positive value in {op}")]
    LogDomain { op: &'static str },

    /// Checkpoint file does not start with the SIV1 magic bytes.
    #[error("bad magic in checkpoint: expected 53 49 56 31, found {found:02x?}")]
    BadMagic { found: [u8; 4] },

    /// Checkpoint format version is not supported.
    #[error("unsupported checkpoint version {found} (expected 1)")]
    UnsupportedVersion { found: u32 },

    /// File ended in the middle of a record.
    #[error("truncated file while reading {context}")]
    Truncated { context: &'static str },

    /// A fairness group or (group, class) cell has no members.
    #[error("empty cell in fairness computation: {cell}")]
    EmptyCell { cell: String },

    /// Matrix is not positive definite even after ridge regularization.
    #[error("covariance not positive semidefinite after ridge (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    /// A computation produced a numerically unusable result.
    #[error("numeric failure in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
