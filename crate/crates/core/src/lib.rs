//! Dual-mode (offline/online) streaming encoder with per-chunk online
//! registers.
//!
//! The online sequence appends, for every chunk of `C` frames, `L` look-ahead
//! frames and `R` learnable register slots. A chunk-wise attention mask keeps
//! each chunk from seeing anything beyond its own look-ahead and registers, so
//! the same weights serve full-context (offline) and streaming (online)
//! inference. This crate holds the algorithmic core: layouts and masks, a
//! small transformer with reverse-mode gradients, the quantizer and losses of
//! the dual-mode pre-training objective, a KV-cached streaming engine and a
//! toy training loop. It is `no_std` and needs only `alloc`.
#![no_std]

extern crate alloc;

pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod layout;
pub mod losses;
pub mod mask;
pub mod mat;
pub mod objective;
pub mod params;
pub mod quantizer;
pub mod stream;
pub mod tape;
pub mod train;

pub use config::{StreamConfig, DEFAULT_FRAME_MS};
pub use encoder::{
    apply_time_mask, encode, encode_dual, encode_offline, encode_online, sinusoidal_pe,
    DualOutput, MaskingPlan,
};
pub use error::{Error, Result};
pub use layout::{
    assemble_online_input, extract_frame_outputs, extract_register_outputs, lookahead_ranges,
    partition_chunks, ChunkLayout, SlotDescriptor, SlotKind, TimeRange,
};
pub use losses::{LossBreakdown, LossWeights};
pub use mask::{allowed, build_offline_mask, build_online_mask, AttentionMask};
pub use mat::{Mat, Real};
pub use params::{ModelConfig, ParamGroup, Params};
pub use stream::{latency_report, open_stream, ChunkOutput, LatencyReport, StreamState};
pub use train::{TrainConfig, Trainer};
