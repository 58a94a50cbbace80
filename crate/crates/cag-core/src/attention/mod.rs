//! Unified self-attention over the concatenated streams with 2D rotary
//! positions, additive -inf mask bias, and explicit backward passes.

mod block;
pub mod checks;
mod core;
mod rope;

pub use block::{
    block_backward, block_forward, gelu, gelu_derivative, rms_norm_backward, rms_norm_rows,
    BlockCache, BlockConfig, BlockGrads, BlockWeights,
};
pub use core::{attention_backward, masked_attention, masked_attention_cached, AttentionCache};
pub use rope::{apply_rope2d, apply_rope2d_transpose};

use thiserror::Error;

use crate::mask::MaskError;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadSplit { d_model: usize, n_heads: usize },
    #[error("head_dim {0} must be divisible by 4 (two rotary axes)")]
    HeadDimRotary(usize),
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Attention geometry: feature width, head count, rotary base.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub rope_base: f64,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, rope_base: f64) -> Result<Self, AttentionError> {
        let cfg = AttentionConfig { d_model, n_heads, rope_base };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(AttentionError::HeadSplit {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if self.head_dim() % 4 != 0 {
            return Err(AttentionError::HeadDimRotary(self.head_dim()));
        }
        Ok(())
    }
}

/// Borrowed q/k/v plus positions and mask for one attention call.
/// All matrices are row-major `n x d_model`.
pub struct AttentionIo<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub positions: &'a [(i64, i64)],
    pub mask: &'a crate::mask::AttentionMask,
}
