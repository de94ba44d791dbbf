//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty grid")]
    EmptyGrid,

    #[error("no residual layers (grid has {layers} layers, need at least 3)")]
    NoResidualLayers { layers: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("id {id} out of range for {vocab} (size {size})")]
    VocabRange {
        id: u32,
        vocab: &'static str,
        size: u32,
    },

    #[error("malformed segment order at position {position}: {reason}")]
    SegmentOrder { position: usize, reason: String },

    #[error("loss mask selects no positions")]
    EmptyLossMask,

    #[error("layer index {layer} outside residual range 2..={layers}")]
    LayerRange { layer: usize, layers: usize },

    #[error("prompt has {prompt} layers but the grid expects {expected}")]
    PromptLayers { prompt: usize, expected: usize },

    #[error("prompt length {prompt} must be shorter than {limit}")]
    PromptTooLong { prompt: usize, limit: usize },

    #[error("non-finite gradient at step {step} in {tensor}")]
    NonFiniteGradient { step: usize, tensor: String },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset does not match phase {phase}: {reason}")]
    DatasetPhaseMismatch { phase: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checksum mismatch for tensor {name}")]
    ChecksumMismatch { name: String },

    #[error("dataset record {line}: {reason}")]
    DatasetRecord { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
