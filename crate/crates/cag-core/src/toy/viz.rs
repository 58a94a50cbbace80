//! Attention-map export: the heatmap of a referential word's attention row
//! over each reference grid's VAE keys, written as PGM (P5) images plus the
//! raw values in CAGT form.

use std::path::{Path, PathBuf};

use crate::layout::Layout;
use crate::mask::AttentionMask;
use crate::numerics::{write_tensor, RngKey, Tensor};

use super::dataset::ToyDataset;
use super::model::{assemble_inputs, ToyModel};
use super::train::{scene_layout, scene_mask, MaskMode};
use super::HarnessError;

/// Paths written for one (scene, word, layer, head) export.
#[derive(Debug, Clone)]
pub struct AttentionMapFiles {
    pub pgm: Vec<PathBuf>,
    pub cagt: Vec<PathBuf>,
}

/// Binary PGM (P5), maxval 255, row-major `rows x cols` bytes.
pub fn write_pgm(
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    bytes: &[u8],
) -> Result<(), HarnessError> {
    if bytes.len() != rows * cols {
        return Err(HarnessError::Invalid(format!(
            "pgm payload {} does not match {rows}x{cols}",
            bytes.len()
        )));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out)?;
    Ok(())
}

/// The word's attention row over each reference grid at (layer, head),
/// averaged over the word's instruction tokens. Raw probabilities, one
/// `grid x grid` map per reference.
pub fn attention_heatmaps(
    model: &ToyModel<f32>,
    dataset: &ToyDataset,
    scene_idx: usize,
    word: &str,
    layer: usize,
    head: usize,
    mask_mode: MaskMode,
    seed: u64,
) -> Result<(Layout, Vec<Vec<f32>>), HarnessError> {
    let scene = dataset
        .scenes
        .get(scene_idx)
        .ok_or(HarnessError::SceneOutOfRange(scene_idx, dataset.scenes.len()))?;
    let wanted = word.to_lowercase();
    let grounding = scene
        .groundings
        .groundings
        .iter()
        .find(|g| g.word.text.to_lowercase() == wanted)
        .ok_or_else(|| HarnessError::NotReferential {
            word: word.to_string(),
            valid: scene.groundings.groundings.iter().map(|g| g.word.text.clone()).collect(),
        })?;
    if layer >= model.cfg.n_layers || head >= model.cfg.n_heads {
        return Err(HarnessError::Invalid(format!(
            "layer {layer}/head {head} outside model ({} layers, {} heads)",
            model.cfg.n_layers, model.cfg.n_heads
        )));
    }

    let layout = scene_layout(dataset, true)?;
    let mask: AttentionMask = scene_mask(dataset, scene, &layout, mask_mode, false)?;

    let k = dataset.params.feature_dim;
    let cells = dataset.cells();
    let x1 = dataset.vae_features(&scene.target_codes);
    let key = RngKey::new(seed).substream("viz-noise").substream_u64(scene.id as u64);
    let t = 0.5f32;
    let noised: Vec<f32> = (0..cells * k)
        .map(|j| (1.0 - t) * key.at(j as u64).normal() as f32 + t * x1[j])
        .collect();
    let inputs = assemble_inputs(dataset, scene, &layout, &noised, t as f64, false)?;
    let (_, cache) = model.forward(inputs, &layout, &mask)?;

    let n = layout.total_len;
    let text = layout.vlm_text()?;
    let probs = cache.block_caches[layer].head_probs(head);

    let rows: Vec<usize> = grounding
        .word
        .token_spans
        .iter()
        .flat_map(|&(s, e)| (s..e).map(|idx| text.start + idx))
        .collect();

    let g = dataset.params.grid;
    let mut maps = Vec::with_capacity(dataset.params.n_refs);
    for i in 0..dataset.params.n_refs {
        let seg = layout.vae_ref(i).expect("full layout has every reference");
        let mut map = vec![0f32; g * g];
        for &q in &rows {
            for (cell, tok) in (seg.start..seg.end).enumerate() {
                map[cell] += probs[q * n + tok];
            }
        }
        for v in map.iter_mut() {
            *v /= rows.len() as f32;
        }
        maps.push(map);
    }
    Ok((layout, maps))
}

/// Exports one heatmap pair (PGM + CAGT) per reference image. PGM values
/// are normalized to [0, 255] by the global maximum across the references,
/// so exact zeros stay exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn export_attention_maps(
    model: &ToyModel<f32>,
    dataset: &ToyDataset,
    scene_idx: usize,
    word: &str,
    layer: usize,
    head: usize,
    mask_mode: MaskMode,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<AttentionMapFiles, HarnessError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let (_, maps) = attention_heatmaps(model, dataset, scene_idx, word, layer, head, mask_mode, seed)?;

    let g = dataset.params.grid;
    let global_max = maps
        .iter()
        .flat_map(|m| m.iter().copied())
        .fold(0f32, f32::max);

    let mut files = AttentionMapFiles { pgm: Vec::new(), cagt: Vec::new() };
    for (i, map) in maps.iter().enumerate() {
        let stem = format!("scene{scene_idx}_{word}_l{layer}h{head}_ref{i}");
        let bytes: Vec<u8> = map
            .iter()
            .map(|&v| {
                if global_max > 0.0 {
                    ((v / global_max) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        let pgm = out_dir.join(format!("{stem}.pgm"));
        write_pgm(&pgm, g, g, &bytes)?;
        let cagt = out_dir.join(format!("{stem}.cagt"));
        write_tensor(&cagt, &Tensor::from_f32(vec![g, g], map.clone())?)?;
        files.pgm.push(pgm);
        files.cagt.push(cagt);
    }
    Ok(files)
}
