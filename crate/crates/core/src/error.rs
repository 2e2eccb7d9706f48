//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a numeric operation, naming the op and shapes.
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An internal contract was violated (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid user-supplied parameter or configuration value.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data failed a structural invariant (symmetry, finiteness, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A time-series column is constant, so no correlation is defined.
    #[error("degenerate signal: ROI column {roi} has zero variance")]
    DegenerateSignal { roi: usize },

    /// On-disk format problem (bad magic, truncation, invariant violation).
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Training failure such as a non-finite loss.
    #[error("training error at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    /// Split/evaluation protocol cannot be formed from the given records.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The gradient-check oracle itself is unusable (e.g. non-deterministic loss).
    #[error("oracle error: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, Error>;
