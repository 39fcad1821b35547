//! Decoder-only transformer: pre-norm RMSNorm blocks, SwiGLU feed-forward,
//! tied embeddings, learned or rotary positions, any attention variant.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, Positional, Preset, INIT_STD, NORM_EPS, ROPE_BASE};
pub use model::{apply_rope, block_forward, rmsnorm, swiglu_ffn, BatchShape, Forward, LayerTrace, Model, TokenBatch};
pub use params::{count_params, Component, Init, LayerSlots, ParamLayout, ParamLedger, ParamSpec};

#[cfg(test)]
mod tests;
