use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backward seed {id} is not a value on this tape (tape has {len} values)")]
    SeedNotOnTape { id: usize, len: usize },

    #[error("backward seed {id} is not a scalar (shape {shape:?})")]
    SeedNotScalar { id: usize, shape: Vec<usize> },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("checkpoint manifest malformed: {reason}")]
    CheckpointManifest { reason: String },

    #[error("checkpoint tensor '{name}': declared shape {shape:?} does not match declared length {len}")]
    CheckpointShape {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("checkpoint payload truncated: {reason}")]
    CheckpointTruncated { reason: String },

    #[error("checkpoint does not describe a usable model: {reason}")]
    CheckpointModel { reason: String },

    #[error("dataset record {index} malformed: {reason}")]
    DatasetRecord { index: usize, reason: String },

    #[error("dataset file truncated or corrupt at byte offset {offset}: {reason}")]
    DatasetTruncated { offset: u64, reason: String },

    #[error("dataset header malformed: {reason}")]
    DatasetHeader { reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
