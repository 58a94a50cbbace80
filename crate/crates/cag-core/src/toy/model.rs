//! Small conditioned transformer over the concatenated streams.
//!
//! Token embeddings are sums of linear projections of per-token features:
//! appearance codes through `proj_vae` (shared by target and reference VAE
//! tokens), semantic codes through `proj_vlm`, fixed sinusoidal cell
//! coordinates through `proj_coord`, fixed time features through
//! `proj_time`, plus vocab and stream-tag embeddings. The head reads the
//! target rows after a final rms norm. Forward and backward are explicit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    block_backward, block_forward, rms_norm_backward, rms_norm_rows, AttentionConfig, BlockCache,
    BlockConfig, BlockWeights,
};
use crate::layout::{Layout, SegmentKind};
use crate::mask::AttentionMask;
use crate::numerics::{
    matmul_into, matmul_nt_into, matmul_tn_into, read_tensor, write_tensor, DType, FloatElem,
    RngKey, Tensor,
};

use super::dataset::{ToyDataset, ToyScene};
use super::HarnessError;

/// Fixed per-cell coordinate feature width (two frequencies per axis).
pub const COORD_FEATS: usize = 8;
/// Fixed time feature width.
pub const TIME_FEATS: usize = 6;
/// Stream tags: vlm_ref, vlm_text, vae_target, vae_ref.
pub const N_TAGS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            rope_base: 10_000.0,
            rms_eps: 1e-6,
            feature_dim: 8,
            vocab_size: 8,
            init_std: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn attn(&self) -> AttentionConfig {
        AttentionConfig { d_model: self.d_model, n_heads: self.n_heads, rope_base: self.rope_base }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig { attn: self.attn(), d_ff: self.d_ff, rms_eps: self.rms_eps }
    }
}

pub fn coord_features(row: usize, col: usize) -> [f64; COORD_FEATS] {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = [0.0; COORD_FEATS];
    for (axis, &a) in [row, col].iter().enumerate() {
        for (f, period) in [8.0f64, 32.0].iter().enumerate() {
            let angle = two_pi * a as f64 / period;
            out[axis * 4 + 2 * f] = angle.sin();
            out[axis * 4 + 2 * f + 1] = angle.cos();
        }
    }
    out
}

pub fn time_features(t: f64) -> [f64; TIME_FEATS] {
    let two_pi = 2.0 * std::f64::consts::PI;
    [1.0, t, (two_pi * t).sin(), (two_pi * t).cos(), (2.0 * two_pi * t).sin(), (2.0 * two_pi * t).cos()]
}

/// Per-token input features for one scene, aligned with a [`Layout`].
#[derive(Debug, Clone)]
pub struct SceneInputs<T> {
    pub n: usize,
    pub feats_vae: Vec<T>,
    pub feats_vlm: Vec<T>,
    pub coords: Vec<T>,
    pub times: Vec<T>,
    pub tok_ids: Vec<Option<usize>>,
    pub tags: Vec<usize>,
}

/// Assembles per-token features for a scene. `noised_target` is the
/// row-major `cells x feature_dim` noised latent at time `t`; `drop_text`
/// nulls the vocab content of text tokens (their tag embedding remains).
pub fn assemble_inputs<T: FloatElem>(
    dataset: &ToyDataset,
    scene: &ToyScene,
    layout: &Layout,
    noised_target: &[T],
    t: f64,
    drop_text: bool,
) -> Result<SceneInputs<T>, HarnessError> {
    let k = dataset.params.feature_dim;
    let g = dataset.params.grid;
    let n = layout.total_len;
    if noised_target.len() != g * g * k {
        return Err(HarnessError::Invalid(format!(
            "noised target has {} entries, expected {}",
            noised_target.len(),
            g * g * k
        )));
    }

    let mut inputs = SceneInputs {
        n,
        feats_vae: vec![T::zero(); n * k],
        feats_vlm: vec![T::zero(); n * k],
        coords: vec![T::zero(); n * COORD_FEATS],
        times: vec![T::zero(); n * TIME_FEATS],
        tok_ids: vec![None; n],
        tags: vec![0; n],
    };

    let write_cell_coords = |coords: &mut [T], tok: usize, cell: usize| {
        let feats = coord_features(cell / g, cell % g);
        for (j, &f) in feats.iter().enumerate() {
            coords[tok * COORD_FEATS + j] = T::from_f64(f);
        }
    };

    for seg in &layout.segments {
        match seg.kind {
            SegmentKind::VlmRef(i) => {
                let feats = dataset.vlm_features(&scene.ref_codes[i]);
                for (cell, tok) in (seg.start..seg.end).enumerate() {
                    for j in 0..k {
                        inputs.feats_vlm[tok * k + j] = T::from_f64(feats[cell * k + j] as f64);
                    }
                    write_cell_coords(&mut inputs.coords, tok, cell);
                    inputs.tags[tok] = 0;
                }
            }
            SegmentKind::VlmText => {
                for (idx, tok) in (seg.start..seg.end).enumerate() {
                    if !drop_text {
                        let token = &scene.instruction[idx];
                        inputs.tok_ids[tok] = dataset.token_id(token);
                    }
                    inputs.tags[tok] = 1;
                }
            }
            SegmentKind::VaeTarget => {
                let tf = time_features(t);
                for (cell, tok) in (seg.start..seg.end).enumerate() {
                    inputs.feats_vae[tok * k..tok * k + k]
                        .copy_from_slice(&noised_target[cell * k..cell * k + k]);
                    write_cell_coords(&mut inputs.coords, tok, cell);
                    for (j, &f) in tf.iter().enumerate() {
                        inputs.times[tok * TIME_FEATS + j] = T::from_f64(f);
                    }
                    inputs.tags[tok] = 2;
                }
            }
            SegmentKind::VaeRef(i) => {
                let feats = dataset.vae_features(&scene.ref_codes[i]);
                for (cell, tok) in (seg.start..seg.end).enumerate() {
                    for j in 0..k {
                        inputs.feats_vae[tok * k + j] = T::from_f64(feats[cell * k + j] as f64);
                    }
                    write_cell_coords(&mut inputs.coords, tok, cell);
                    inputs.tags[tok] = 3;
                }
            }
        }
    }
    Ok(inputs)
}

/// Learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub cfg: ModelConfig,
    pub tok_embed: Vec<T>,
    pub proj_vae: Vec<T>,
    pub proj_vlm: Vec<T>,
    pub proj_coord: Vec<T>,
    pub proj_time: Vec<T>,
    pub tag_embed: Vec<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub head: Vec<T>,
}

impl<T: FloatElem> ToyModel<T> {
    pub fn init(cfg: ModelConfig, key: &RngKey) -> ToyModel<T> {
        let d = cfg.d_model;
        let k = cfg.feature_dim;
        let randn = |label: &str, len: usize| -> Vec<T> {
            let key = key.substream(label);
            (0..len).map(|i| T::from_f64(cfg.init_std * key.at(i as u64).normal())).collect()
        };
        ToyModel {
            tok_embed: randn("tok_embed", cfg.vocab_size * d),
            proj_vae: randn("proj_vae", k * d),
            proj_vlm: randn("proj_vlm", k * d),
            proj_coord: randn("proj_coord", COORD_FEATS * d),
            proj_time: randn("proj_time", TIME_FEATS * d),
            tag_embed: randn("tag_embed", N_TAGS * d),
            blocks: (0..cfg.n_layers)
                .map(|l| BlockWeights::init(&cfg.block(), &key.substream_u64(l as u64), cfg.init_std))
                .collect(),
            head: randn("head", d * k),
            cfg,
        }
    }

    pub fn zeros_like(&self) -> ToyModel<T> {
        ToyModel {
            cfg: self.cfg,
            tok_embed: vec![T::zero(); self.tok_embed.len()],
            proj_vae: vec![T::zero(); self.proj_vae.len()],
            proj_vlm: vec![T::zero(); self.proj_vlm.len()],
            proj_coord: vec![T::zero(); self.proj_coord.len()],
            proj_time: vec![T::zero(); self.proj_time.len()],
            tag_embed: vec![T::zero(); self.tag_embed.len()],
            blocks: self.blocks.iter().map(|_| BlockWeights::zeros(&self.cfg.block())).collect(),
            head: vec![T::zero(); self.head.len()],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "tok_embed".to_string(),
            "proj_vae".to_string(),
            "proj_vlm".to_string(),
            "proj_coord".to_string(),
            "proj_time".to_string(),
            "tag_embed".to_string(),
        ];
        for l in 0..self.blocks.len() {
            for w in ["wq", "wk", "wv", "wo", "w1", "w2"] {
                names.push(format!("blocks.{l}.{w}"));
            }
        }
        names.push("head".to_string());
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let d = self.cfg.d_model;
        let k = self.cfg.feature_dim;
        let mut shapes = vec![
            vec![self.cfg.vocab_size, d],
            vec![k, d],
            vec![k, d],
            vec![COORD_FEATS, d],
            vec![TIME_FEATS, d],
            vec![N_TAGS, d],
        ];
        for _ in 0..self.blocks.len() {
            shapes.push(vec![d, d]);
            shapes.push(vec![d, d]);
            shapes.push(vec![d, d]);
            shapes.push(vec![d, d]);
            shapes.push(vec![d, self.cfg.d_ff]);
            shapes.push(vec![self.cfg.d_ff, d]);
        }
        shapes.push(vec![d, k]);
        shapes
    }

    pub fn params(&self) -> Vec<&Vec<T>> {
        let mut v = vec![
            &self.tok_embed,
            &self.proj_vae,
            &self.proj_vlm,
            &self.proj_coord,
            &self.proj_time,
            &self.tag_embed,
        ];
        for b in &self.blocks {
            v.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2]);
        }
        v.push(&self.head);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let ToyModel {
            tok_embed,
            proj_vae,
            proj_vlm,
            proj_coord,
            proj_time,
            tag_embed,
            blocks,
            head,
            ..
        } = self;
        let mut v = vec![tok_embed, proj_vae, proj_vlm, proj_coord, proj_time, tag_embed];
        for b in blocks {
            v.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2]);
        }
        v.push(head);
        v
    }

    /// `self += other * scale`, elementwise over all parameters.
    pub fn add_scaled(&mut self, other: &ToyModel<T>, scale: T) {
        let others = other.params();
        for (dst, src) in self.params_mut().into_iter().zip(others) {
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = *d + s * scale;
            }
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let names = self.param_names();
        let shapes = self.param_shapes();
        let manifest = CheckpointManifest {
            version: 1,
            dtype: match T::DTYPE {
                DType::F32 => "f32".into(),
                DType::F64 => "f64".into(),
                DType::Bool => unreachable!("model params are floats"),
            },
            config: self.cfg,
            tensors: names
                .iter()
                .zip(&shapes)
                .map(|(n, s)| TensorEntry { name: n.clone(), shape: s.clone() })
                .collect(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        for ((name, shape), param) in names.iter().zip(&shapes).zip(self.params()) {
            let tensor = match T::DTYPE {
                DType::F32 => Tensor::from_f32(
                    shape.clone(),
                    param.iter().map(|&x| x.to_f64() as f32).collect(),
                )?,
                _ => Tensor::from_f64(shape.clone(), param.iter().map(|&x| x.to_f64()).collect())?,
            };
            write_tensor(dir.join(format!("{name}.cagt")), &tensor)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<ToyModel<T>, HarnessError> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut model = ToyModel::init(manifest.config, &RngKey::new(0));
        let names = model.param_names();
        let shapes = model.param_shapes();
        for ((name, shape), param) in names.iter().zip(&shapes).zip(model.params_mut()) {
            let tensor = read_tensor(dir.join(format!("{name}.cagt")))?;
            if tensor.dims() != shape.as_slice() {
                return Err(HarnessError::Invalid(format!(
                    "checkpoint tensor {name}: dims {:?}, expected {shape:?}",
                    tensor.dims()
                )));
            }
            let values: Vec<T> = match (tensor.as_f32(), tensor.as_f64()) {
                (Some(v), _) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
                (_, Some(v)) => v.iter().map(|&x| T::from_f64(x)).collect(),
                _ => {
                    return Err(HarnessError::Invalid(format!(
                        "checkpoint tensor {name} is not a float tensor"
                    )))
                }
            };
            *param = values;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Forward state for one scene.
pub struct ForwardCache<T> {
    pub inputs: SceneInputs<T>,
    pub block_caches: Vec<BlockCache<T>>,
    pub final_norm: Vec<T>,
    pub final_rms: Vec<T>,
    pub target_range: (usize, usize),
}

impl<T: FloatElem> ToyModel<T> {
    fn embed(&self, inputs: &SceneInputs<T>) -> Vec<T> {
        let d = self.cfg.d_model;
        let k = self.cfg.feature_dim;
        let n = inputs.n;
        let mut x = vec![T::zero(); n * d];
        let mut tmp = vec![T::zero(); n * d];
        matmul_into(&inputs.feats_vae, &self.proj_vae, n, k, d, &mut x);
        matmul_into(&inputs.feats_vlm, &self.proj_vlm, n, k, d, &mut tmp);
        for (o, &t) in x.iter_mut().zip(&tmp) {
            *o = *o + t;
        }
        matmul_into(&inputs.coords, &self.proj_coord, n, COORD_FEATS, d, &mut tmp);
        for (o, &t) in x.iter_mut().zip(&tmp) {
            *o = *o + t;
        }
        matmul_into(&inputs.times, &self.proj_time, n, TIME_FEATS, d, &mut tmp);
        for (o, &t) in x.iter_mut().zip(&tmp) {
            *o = *o + t;
        }
        for t in 0..n {
            if let Some(id) = inputs.tok_ids[t] {
                for j in 0..d {
                    x[t * d + j] = x[t * d + j] + self.tok_embed[id * d + j];
                }
            }
            let tag = inputs.tags[t];
            for j in 0..d {
                x[t * d + j] = x[t * d + j] + self.tag_embed[tag * d + j];
            }
        }
        x
    }

    /// Predicts the velocity field on the target cells. Returns the
    /// row-major `cells x feature_dim` prediction plus the cache for
    /// [`ToyModel::backward`].
    pub fn forward(
        &self,
        inputs: SceneInputs<T>,
        layout: &Layout,
        mask: &AttentionMask,
    ) -> Result<(Vec<T>, ForwardCache<T>), HarnessError> {
        let d = self.cfg.d_model;
        let k = self.cfg.feature_dim;
        if inputs.n != layout.total_len {
            return Err(HarnessError::Invalid(format!(
                "inputs cover {} tokens, layout has {}",
                inputs.n, layout.total_len
            )));
        }
        let target = layout.vae_target()?;
        let mut x = self.embed(&inputs);
        let block_cfg = self.cfg.block();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for weights in &self.blocks {
            let (next, cache) = block_forward(&x, &layout.positions, mask, weights, &block_cfg)?;
            block_caches.push(cache);
            x = next;
        }
        let (y, rms) = rms_norm_rows(&x, d, self.cfg.rms_eps);
        let rows = target.len();
        let yt = &y[target.start * d..target.end * d];
        let mut pred = vec![T::zero(); rows * k];
        matmul_into(yt, &self.head, rows, d, k, &mut pred);
        Ok((
            pred,
            ForwardCache {
                inputs,
                block_caches,
                final_norm: y,
                final_rms: rms,
                target_range: (target.start, target.end),
            },
        ))
    }

    /// Gradients of a scalar loss w.r.t. every parameter, given the loss
    /// gradient at the prediction.
    pub fn backward(
        &self,
        layout: &Layout,
        mask: &AttentionMask,
        cache: &ForwardCache<T>,
        dpred: &[T],
    ) -> Result<ToyModel<T>, HarnessError> {
        let d = self.cfg.d_model;
        let k = self.cfg.feature_dim;
        let n = cache.inputs.n;
        let (ts, te) = cache.target_range;
        let rows = te - ts;

        let mut grads = self.zeros_like();

        // pred = y[target] . head
        let yt = &cache.final_norm[ts * d..te * d];
        matmul_tn_into(yt, dpred, rows, d, k, &mut grads.head);
        let mut dy = vec![T::zero(); n * d];
        let mut dyt = vec![T::zero(); rows * d];
        matmul_nt_into(dpred, &self.head, rows, k, d, &mut dyt);
        dy[ts * d..te * d].copy_from_slice(&dyt);

        let mut dx = rms_norm_backward(&dy, &cache.final_norm, &cache.final_rms, d);

        let block_cfg = self.cfg.block();
        for (weights, (bcache, grad_slot)) in self
            .blocks
            .iter()
            .zip(cache.block_caches.iter().zip(grads.blocks.iter_mut()))
            .rev()
        {
            let (dprev, bg) =
                block_backward(&dx, &layout.positions, mask, weights, &block_cfg, bcache)?;
            *grad_slot = bg;
            dx = dprev;
        }

        // Embedding assembly gradients.
        let inp = &cache.inputs;
        matmul_tn_into(&inp.feats_vae, &dx, n, k, d, &mut grads.proj_vae);
        matmul_tn_into(&inp.feats_vlm, &dx, n, k, d, &mut grads.proj_vlm);
        matmul_tn_into(&inp.coords, &dx, n, COORD_FEATS, d, &mut grads.proj_coord);
        matmul_tn_into(&inp.times, &dx, n, TIME_FEATS, d, &mut grads.proj_time);
        for t in 0..n {
            if let Some(id) = inp.tok_ids[t] {
                for j in 0..d {
                    grads.tok_embed[id * d + j] = grads.tok_embed[id * d + j] + dx[t * d + j];
                }
            }
            let tag = inp.tags[t];
            for j in 0..d {
                grads.tag_embed[tag * d + j] = grads.tag_embed[tag * d + j] + dx[t * d + j];
            }
        }
        Ok(grads)
    }
}
