//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("zero-norm vector in cosine similarity (degenerate feature)")]
    ZeroNorm,

    #[error("invalid clamp interval: lo {lo} > hi {hi}")]
    InvalidInterval { lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} out of range (num_classes = {num_classes})")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("class {0} has no samples")]
    MissingClass(usize),

    #[error("between-class covariance is zero; collapse metric undefined")]
    DegenerateCovariance,

    #[error("fewer than 2 classes with at least 2 members survive; collapse metric undefined")]
    TooFewClasses,

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("unknown architecture tag {0:?} (expected convnet, mlp, or attnnet)")]
    UnknownArch(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("perturbation exceeds budget: max |delta| = {max_abs} > xi = {xi}")]
    BudgetViolation { max_abs: f64, xi: f64 },

    // Container-format errors. Each magic/version/payload failure is distinct
    // so callers and tests can tell corruption modes apart.
    #[error("not a {expected} file (bad magic)")]
    BadMagic { expected: &'static str },

    #[error("unsupported {kind} format version {found} (supported: {supported})")]
    VersionMismatch {
        kind: &'static str,
        found: char,
        supported: char,
    },

    #[error("truncated {what}")]
    Truncated { what: String },

    #[error("trailing bytes after {what}")]
    TrailingBytes { what: &'static str },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("tensor count mismatch: expected {expected}, found {found}")]
    TensorCountMismatch { expected: usize, found: usize },

    #[error("malformed metadata: {0}")]
    MalformedMetadata(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
