//! Error types shared across the crate.
//!
//! Every fallible operation returns [`Result`]. Errors carry enough context
//! (paths, sample ids, levels, shapes) to be actionable without a debugger,
//! and each maps to a coarse [`ErrorKind`] so callers such as the CLI can
//! translate failures into exit codes without matching on every variant.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification of an [`Error`], used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, flags, or API misuse.
    Config,
    /// Invalid input data: files, labels, taxonomies, checkpoints.
    Data,
    /// Numerical failure: non-finite values or degenerate vectors.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the attempted operation.
    #[error("shape mismatch in {context}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A configuration value is missing, unparseable, or out of range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The taxonomy definition violates a structural rule.
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    /// Dataset or prediction content failed validation.
    #[error("invalid data: {0}")]
    Data(String),

    /// A class index does not exist at the given level.
    #[error("class index {index} out of range at level {level} ({limit} classes)")]
    ClassOutOfRange {
        level: usize,
        index: usize,
        limit: usize,
    },

    /// A vector whose norm falls below the safety threshold was about to be
    /// normalized or compared by cosine similarity.
    #[error("degenerate vector in {context}: norm {norm:.3e} is below {limit:.1e}")]
    DegenerateVector {
        context: String,
        norm: f64,
        limit: f64,
    },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced in {context}")]
    NonFinite { context: String },

    /// A checkpoint could not be loaded or does not match expectations.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Filesystem failure, tagged with the offending path.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// A structured file failed to parse; `line` is 1-based (0 when the
    /// location is not line-oriented).
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    /// Map this error onto its coarse kind.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ShapeMismatch { .. } | Error::Config(_) => ErrorKind::Config,
            Error::Taxonomy(_)
            | Error::Data(_)
            | Error::ClassOutOfRange { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Parse { .. } => ErrorKind::Data,
            Error::DegenerateVector { .. } | Error::NonFinite { .. } => ErrorKind::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
