//! Double-sparsity attention engine.
//!
//! Post-training sparse attention for autoregressive decoding: offline
//! calibration picks the outlier feature channels per (layer, KV head), a
//! compact 4-bit label cache stores those channels of every key, and each
//! decode step scores the whole context approximately through the label
//! cache, gathers only the top-k tokens, and runs exact attention over
//! them. An offload mode keeps the full KV cache host-side and prefetches
//! the next layer's selected rows through a double buffer while the current
//! layer computes.
//!
//! Everything here is deterministic: a seeded counter-based RNG, libm-backed
//! transcendentals, and byte-exact file formats, so results reproduce
//! bit-for-bit across platforms. A traffic ledger accounts memory bytes
//! analytically in place of wall-clock measurement.

pub mod attention;
pub mod calibration;
pub mod dst1;
pub mod error;
pub mod label_cache;
pub mod math;
pub mod model;
pub mod offload;
pub mod rng;
pub mod tensor;
pub mod traffic;

pub use attention::{
    approx_scores, argtopk, ds_decode, full_attention, gather_attend, truncated_attention,
    AttentionInput, SparsityConfig, TopkResult,
};
pub use calibration::{
    accumulate_stats, calibrate_model, overlap_ratio, select_channels, CalibrationMode,
    CalibrationStats, ChannelMap, ChannelSet,
};
pub use error::{DsError, Result};
pub use label_cache::{append_token, quantize_row_4bit, KvCacheHead, LabelCacheHead};
pub use model::{
    decode_step, decode_step_traced, init_weights, layer_cosine_similarity, prefill, AttnMode,
    ModelCaches, ModelConfig, ModelWeights, PlantSpec,
};
pub use offload::{
    approx_next_query, execute_prefetch, plan_prefetch, BufferSlot, HostKvStore, OffloadEngine,
    PrefetchPlan, SlotStatus,
};
pub use rng::Rng;
pub use tensor::{Dtype, Tensor};
pub use traffic::{
    ds_traffic_ratio_asymptote, label_ablation_report, run_sparsity_sweep, ChargePolicy,
    SweepOptions, SweepResult, TrafficLedger,
};
