//! Shared error type for the engine.

use thiserror::Error;

/// Every fallible operation in this crate returns `Result<T, DsError>`.
#[derive(Debug, Error)]
pub enum DsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("duplicate tensor name {0:?}")]
    NameCollision(String),

    #[error("bad magic: file is not a DST1 tensor file")]
    BadMagic,

    #[error("truncated file: unexpected end of data")]
    TruncatedFile,

    #[error("unknown dtype code {0}")]
    UnknownDtypeCode(u8),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel index {channel} out of range for head dimension {d_h}")]
    ChannelOutOfRange { channel: usize, d_h: usize },

    #[error("k = {k} exceeds sequence length {s}")]
    KTooLarge { k: usize, s: usize },

    #[error("token index {index} out of range for sequence length {s}")]
    IndexOutOfRange { index: usize, s: usize },

    #[error("non-finite value in quantization input")]
    NonFiniteInput,

    #[error("cache capacity {capacity} exceeded")]
    CapacityExceeded { capacity: usize },

    #[error("calibration statistics are empty")]
    EmptyStats,

    #[error("calibration dataset is empty")]
    EmptyDataset,

    #[error(
        "k-outlier calibration is incompatible with grouped-query attention \
         ({heads_q} query heads share {heads_kv} KV heads)"
    )]
    GqaIncompatible { heads_q: usize, heads_kv: usize },

    #[error("token id {token} out of range for vocabulary size {vocab}")]
    VocabOutOfRange { token: u32, vocab: usize },

    #[error("layer index {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("prefetch slot is busy")]
    SlotBusy,

    #[error("prefetch buffer for layer {layer} not ready; pipeline contract violated")]
    BufferNotReady { layer: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, DsError>;
