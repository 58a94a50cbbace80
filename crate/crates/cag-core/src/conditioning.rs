//! Conditioning-set sampling: VAE dropout, text dropout, and the
//! classifier-free guidance combination.
//!
//! VAE dropout removes all reference VAE features jointly (all-or-nothing);
//! text dropout substitutes a null embedding so sequence length and
//! positions stay stable. The two decisions are sampled independently and
//! deterministically from an [`RngKey`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{DType, RngKey, Tensor, TensorData};

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("probability {name} = {value} is outside [0, 1]")]
    BadProbability { name: &'static str, value: f64 },
    #[error("bundle is missing {0}; sampling requires the full bundle")]
    MissingField(&'static str),
    #[error("shape mismatch: cond {cond:?}, uncond {uncond:?}")]
    ShapeMismatch { cond: Vec<usize>, uncond: Vec<usize> },
    #[error("dtype mismatch: cond {cond:?}, uncond {uncond:?}")]
    DtypeMismatch { cond: DType, uncond: DType },
}

/// Dropout probabilities. `full_unconditional` additionally nulls the
/// reference VLM features whenever text dropout fires, for the full
/// unconditional branch variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    #[serde(default = "default_p_vae")]
    pub p_vae: f64,
    #[serde(default = "default_p_text")]
    pub p_text: f64,
    #[serde(default)]
    pub full_unconditional: bool,
}

fn default_p_vae() -> f64 {
    0.5
}

fn default_p_text() -> f64 {
    0.1
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig { p_vae: 0.5, p_text: 0.1, full_unconditional: false }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<(), ConditioningError> {
        for (name, value) in [("p_vae", self.p_vae), ("p_text", self.p_text)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ConditioningError::BadProbability { name, value });
            }
        }
        Ok(())
    }
}

/// Outcome of one keyed dropout draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropDecision {
    pub drop_vae: bool,
    pub drop_text: bool,
}

/// Samples the two dropout decisions; a pure function of (config, key).
/// The decisions come from independent derived streams.
pub fn sample_drop(config: &DropoutConfig, key: &RngKey) -> DropDecision {
    DropDecision {
        drop_vae: key.substream("vae_dropout").uniform() < config.p_vae,
        drop_text: key.substream("text_dropout").uniform() < config.p_text,
    }
}

/// Feature slots conditioning one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    /// Per-reference VLM features.
    pub vlm_ref: Option<Vec<Tensor>>,
    /// Instruction VLM features.
    pub vlm_text: Option<Tensor>,
    /// Per-reference VAE features; absent when dropped.
    pub vae_ref: Option<Vec<Tensor>>,
    /// Noised target latents; always present.
    pub vae_target: Tensor,
    pub drop_vae: bool,
    pub drop_text: bool,
}

fn null_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.dtype(), t.dims().to_vec()).expect("zeros of a valid tensor")
}

/// Applies keyed dropout to a full bundle: with probability `p_vae` the
/// reference VAE features are removed entirely, and independently with
/// probability `p_text` the text features are replaced by the null
/// embedding.
pub fn sample_conditioning(
    bundle: &ConditioningBundle,
    config: &DropoutConfig,
    key: &RngKey,
) -> Result<ConditioningBundle, ConditioningError> {
    config.validate()?;
    if bundle.vlm_ref.is_none() {
        return Err(ConditioningError::MissingField("vlm_ref"));
    }
    if bundle.vlm_text.is_none() {
        return Err(ConditioningError::MissingField("vlm_text"));
    }
    if bundle.vae_ref.is_none() {
        return Err(ConditioningError::MissingField("vae_ref"));
    }

    let decision = sample_drop(config, key);
    let mut out = bundle.clone();
    out.drop_vae = decision.drop_vae;
    out.drop_text = decision.drop_text;
    if decision.drop_vae {
        out.vae_ref = None;
    }
    if decision.drop_text {
        out.vlm_text = bundle.vlm_text.as_ref().map(null_like);
        if config.full_unconditional {
            out.vlm_ref =
                bundle.vlm_ref.as_ref().map(|v| v.iter().map(null_like).collect());
        }
    }
    Ok(out)
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor, ConditioningError> {
    if cond.dims() != uncond.dims() {
        return Err(ConditioningError::ShapeMismatch {
            cond: cond.dims().to_vec(),
            uncond: uncond.dims().to_vec(),
        });
    }
    match (cond.data(), uncond.data()) {
        (TensorData::F32(c), TensorData::F32(u)) => {
            let s = scale as f32;
            let data = c.iter().zip(u).map(|(&c, &u)| u + s * (c - u)).collect();
            Ok(Tensor::from_f32(cond.dims().to_vec(), data).expect("same dims"))
        }
        (TensorData::F64(c), TensorData::F64(u)) => {
            let data = c.iter().zip(u).map(|(&c, &u)| u + scale * (c - u)).collect();
            Ok(Tensor::from_f64(cond.dims().to_vec(), data).expect("same dims"))
        }
        _ => Err(ConditioningError::DtypeMismatch {
            cond: cond.dtype(),
            uncond: uncond.dtype(),
        }),
    }
}
