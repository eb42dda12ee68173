//! Tiny decoder-only transformer with regular and memory projection
//! families, exact KV-cache prefill/decode semantics, and a versioned
//! binary checkpoint format.

pub mod config;
pub mod forward;
pub mod infer;
pub mod params;
pub mod vocab;

pub use config::{validate_beta, ModelConfig, BETA_SET};
pub use forward::{
    attention, build_mask, positional_rows, quantize_f32, segment_forward, BindMode,
    LayerCacheVars, ParamVars, SegmentOut,
};
pub use infer::{
    argmax, compact_extend, forward_decode, forward_prefill_compact, forward_prefill_light,
    generate, CompactCache, DecodeState, KvCache, LayerKv,
};
pub use params::{Parameters, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use vocab::Vocab;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty token sequence")]
    EmptyInput,
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("sequence length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error("params fingerprint mismatch: cache built for {expected:016x}, got {got:016x}")]
    FingerprintMismatch { expected: u64, got: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
