//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("field index {field} out of range (num_fields = {num_fields})")]
    FieldOutOfRange { field: usize, num_fields: usize },

    /// Sketches with different shapes or seeds address counters differently;
    /// merging them would silently corrupt estimates.
    #[error("incompatible sketches: {0}")]
    IncompatibleSketch(String),

    /// Bad magic, wrong version, truncation, or a malformed document.
    #[error("format error: {0}")]
    Format(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    #[error("field {field} never observed unmasked in calibration sample")]
    FieldCoverage { field: usize },

    #[error("training diverged: non-finite loss at batch {batch}")]
    Divergence { batch: usize },

    #[error("model is frozen: {0}")]
    Frozen(String),

    #[error("metric error: {0}")]
    Metric(String),

    /// Wraps the first per-instance failure of a batch run with its index.
    #[error("instance {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
