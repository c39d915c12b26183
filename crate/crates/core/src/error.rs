//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and a parameter set) have incompatible shapes.
    #[error("shape mismatch in {op}: left is {lhs}, right is {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A class label lies outside `[0, classes)`.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A dataset split that must be non-empty is empty.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// The requested task id has no recorded snapshot.
    #[error("unknown task id {0}")]
    UnknownTask(usize),

    /// An IDX file begins with the wrong magic number.
    #[error("bad IDX magic in {path}: expected {expected}, found {found}")]
    IdxMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    /// An IDX file ends before its header-declared payload.
    #[error("truncated IDX file {path}: need {needed} bytes, have {available}")]
    IdxTruncated {
        path: String,
        needed: usize,
        available: usize,
    },

    /// Image and label files disagree on the number of items.
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    /// A configuration key failed validation.
    #[error("config error for `{key}`: {message}")]
    Config { key: String, message: String },

    /// A finite-difference probe observed a non-finite function value.
    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
