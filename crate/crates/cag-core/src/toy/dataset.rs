//! Synthetic referential-copy scenes.
//!
//! Each scene has N reference grids over a shared code book (code 0 is the
//! background); reference i carries one rectangular object filled with a
//! scene-random code, confined to its own column band so objects never
//! collide in the target. The target is the background plus every object
//! pasted at its source coordinates. Instructions are symbolic
//! ("compose subj0 and subj1 ..."), and groundings are exact by
//! construction, so no VLM is needed in toy mode.
//!
//! Appearance features come from two fixed random codebooks: `codebook_vae`
//! doubles as the target feature space, while `codebook_vlm` encodes the
//! same codes in an unrelated basis, standing in for semantic features.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grounding::{Grounding, GroundingSet, ReferentialWord, Source};
use crate::numerics::{read_tensor, write_tensor, RngKey, Tensor};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BboxPolicy {
    /// Exact object rectangle.
    Tight,
    /// Object rectangle padded by one cell, clamped to the grid.
    Pad1,
    /// The whole reference image.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub n_scenes: usize,
    pub n_refs: usize,
    /// Reference and target grids are `grid x grid` cells.
    pub grid: usize,
    pub feature_dim: usize,
    /// Codebook size including the background code 0.
    pub codebook: usize,
    /// Image pixels per latent cell on both axes.
    pub stride_px: usize,
    pub bbox_policy: BboxPolicy,
    pub seed: u64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            n_scenes: 64,
            n_refs: 2,
            grid: 6,
            feature_dim: 8,
            codebook: 6,
            stride_px: 16,
            bbox_policy: BboxPolicy::Tight,
            seed: 0,
        }
    }
}

/// One pasted object: reference `ref_id`'s cell rectangle
/// `[r0, c0, r1, c1)` filled with `code`, copied to the same target cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub ref_id: usize,
    pub rect: [usize; 4],
    pub code: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub id: usize,
    pub instruction: Vec<String>,
    /// Per-reference code grids, row-major `grid x grid`.
    pub ref_codes: Vec<Vec<u8>>,
    pub target_codes: Vec<u8>,
    pub placements: Vec<Placement>,
    #[serde(with = "grounding_set_serde")]
    pub groundings: GroundingSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub params: ToyParams,
    /// Sorted distinct instruction tokens; index = token id.
    pub vocab: Vec<String>,
    /// `codebook x feature_dim`, unit rows.
    pub codebook_vae: Vec<f32>,
    pub codebook_vlm: Vec<f32>,
    pub scenes: Vec<ToyScene>,
}

fn unit_rows(key: &RngKey, rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; rows * cols];
    for r in 0..rows {
        let k = key.substream_u64(r as u64);
        let raw: Vec<f64> = (0..cols).map(|c| k.at(c as u64).normal()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        for c in 0..cols {
            out[r * cols + c] = (raw[c] / norm) as f32;
        }
    }
    out
}

/// Generates a dataset deterministically from its parameters.
pub fn generate_dataset(params: &ToyParams) -> Result<ToyDataset, HarnessError> {
    let g = params.grid;
    let n = params.n_refs;
    if n == 0 || g == 0 || params.n_scenes == 0 {
        return Err(HarnessError::Invalid("n_refs, grid, n_scenes must be positive".into()));
    }
    if g < n {
        return Err(HarnessError::Invalid(format!(
            "grid {g} too small for {n} disjoint column bands"
        )));
    }
    if params.codebook < 2 {
        return Err(HarnessError::Invalid("codebook needs background plus one code".into()));
    }

    let root = RngKey::new(params.seed);
    let codebook_vae = unit_rows(&root.substream("codebook_vae"), params.codebook, params.feature_dim);
    let codebook_vlm = unit_rows(&root.substream("codebook_vlm"), params.codebook, params.feature_dim);

    let mut scenes = Vec::with_capacity(params.n_scenes);
    for id in 0..params.n_scenes {
        let key = root.substream("scene").substream_u64(id as u64);
        let mut ref_codes = vec![vec![0u8; g * g]; n];
        let mut target_codes = vec![0u8; g * g];
        let mut placements = Vec::with_capacity(n);
        let mut groundings = Vec::with_capacity(n);
        let mut instruction = vec!["compose".to_string()];

        for i in 0..n {
            // Column band for reference i keeps target objects disjoint.
            let band_start = i * g / n;
            let band_end = (i + 1) * g / n;
            let band_w = band_end - band_start;
            let k = key.substream_u64(i as u64);
            let h = 1 + k.substream("h").index(3.min(g));
            let w = 1 + k.substream("w").index(3.min(band_w));
            let r0 = k.substream("r").index(g - h + 1);
            let c0 = band_start + k.substream("c").index(band_w - w + 1);
            let code = 1 + k.substream("code").index(params.codebook - 1) as u8;

            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    ref_codes[i][r * g + c] = code;
                    target_codes[r * g + c] = code;
                }
            }
            placements.push(Placement { ref_id: i, rect: [r0, c0, r0 + h, c0 + w], code });

            if i > 0 {
                instruction.push("and".to_string());
            }
            let word = format!("subj{i}");
            instruction.push(word.clone());

            let s = params.stride_px;
            let bbox_px = match params.bbox_policy {
                BboxPolicy::Tight => [c0 * s, r0 * s, (c0 + w) * s, (r0 + h) * s],
                BboxPolicy::Pad1 => [
                    c0.saturating_sub(1) * s,
                    r0.saturating_sub(1) * s,
                    (c0 + w + 1).min(g) * s,
                    (r0 + h + 1).min(g) * s,
                ],
                BboxPolicy::Full => [0, 0, g * s, g * s],
            };
            let span = instruction.len() - 1;
            groundings.push(Grounding {
                word: ReferentialWord { text: word, token_spans: vec![(span, span + 1)] },
                ref_id: i,
                bbox_px,
            });
        }

        let groundings = GroundingSet {
            instruction: instruction.join(" "),
            groundings,
            source: Source::Stub,
        };
        scenes.push(ToyScene { id, instruction, ref_codes, target_codes, placements, groundings });
    }

    let mut vocab: Vec<String> =
        scenes.iter().flat_map(|s| s.instruction.iter().cloned()).collect();
    vocab.sort();
    vocab.dedup();

    Ok(ToyDataset { params: *params, vocab, codebook_vae, codebook_vlm, scenes })
}

impl ToyDataset {
    pub fn text_len(&self) -> usize {
        2 * self.params.n_refs
    }

    pub fn cells(&self) -> usize {
        self.params.grid * self.params.grid
    }

    pub fn image_px(&self) -> usize {
        self.params.grid * self.params.stride_px
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.vocab.binary_search_by(|t| t.as_str().cmp(token)).ok()
    }

    /// Feature row of a code in a codebook.
    fn code_row<'a>(&self, book: &'a [f32], code: u8) -> &'a [f32] {
        let k = self.params.feature_dim;
        &book[code as usize * k..(code as usize + 1) * k]
    }

    /// VAE features of a code grid, row-major `cells x feature_dim`.
    pub fn vae_features(&self, codes: &[u8]) -> Vec<f32> {
        codes.iter().flat_map(|&c| self.code_row(&self.codebook_vae, c).to_vec()).collect()
    }

    /// Semantic (VLM-style) features of a code grid.
    pub fn vlm_features(&self, codes: &[u8]) -> Vec<f32> {
        codes.iter().flat_map(|&c| self.code_row(&self.codebook_vlm, c).to_vec()).collect()
    }

    /// Train/eval split: the last `n_eval` scenes are held out.
    pub fn split(&self, n_eval: usize) -> (&[ToyScene], &[ToyScene]) {
        let n_eval = n_eval.min(self.scenes.len().saturating_sub(1));
        let cut = self.scenes.len() - n_eval;
        (&self.scenes[..cut], &self.scenes[cut..])
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            version: 1,
            params: self.params,
            vocab: self.vocab.clone(),
            scenes: self.scenes.clone(),
        };
        std::fs::write(dir.join("scenes.json"), serde_json::to_string_pretty(&manifest)?)?;
        let k = self.params.feature_dim;
        let c = self.params.codebook;
        write_tensor(
            dir.join("codebook_vae.cagt"),
            &Tensor::from_f32(vec![c, k], self.codebook_vae.clone())?,
        )?;
        write_tensor(
            dir.join("codebook_vlm.cagt"),
            &Tensor::from_f32(vec![c, k], self.codebook_vlm.clone())?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<ToyDataset, HarnessError> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("scenes.json"))?)?;
        let load_book = |name: &str| -> Result<Vec<f32>, HarnessError> {
            let t = read_tensor(dir.join(name))?;
            let dims = t.dims().to_vec();
            if dims != [manifest.params.codebook, manifest.params.feature_dim] {
                return Err(HarnessError::InvalidDataset(format!(
                    "{name}: dims {dims:?} do not match params"
                )));
            }
            Ok(t.as_f32().expect("codebooks are f32").to_vec())
        };
        let dataset = ToyDataset {
            params: manifest.params,
            vocab: manifest.vocab,
            codebook_vae: load_book("codebook_vae.cagt")?,
            codebook_vlm: load_book("codebook_vlm.cagt")?,
            scenes: manifest.scenes,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let g = self.params.grid;
        for scene in &self.scenes {
            if scene.ref_codes.len() != self.params.n_refs {
                return Err(HarnessError::InvalidDataset(format!(
                    "scene {}: {} ref grids, expected {}",
                    scene.id,
                    scene.ref_codes.len(),
                    self.params.n_refs
                )));
            }
            for codes in scene.ref_codes.iter().chain([&scene.target_codes]) {
                if codes.len() != g * g {
                    return Err(HarnessError::InvalidDataset(format!(
                        "scene {}: grid size mismatch",
                        scene.id
                    )));
                }
                if codes.iter().any(|&c| c as usize >= self.params.codebook) {
                    return Err(HarnessError::InvalidDataset(format!(
                        "scene {}: code out of range",
                        scene.id
                    )));
                }
            }
            for tok in &scene.instruction {
                if self.token_id(tok).is_none() {
                    return Err(HarnessError::InvalidDataset(format!(
                        "scene {}: token {tok:?} not in vocab",
                        scene.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    params: ToyParams,
    vocab: Vec<String>,
    scenes: Vec<ToyScene>,
}

// GroundingSet keeps its spec wire format (spans as pairs); embed it in the
// manifest through that same form.
mod grounding_set_serde {
    use super::GroundingSet;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(set: &GroundingSet, s: S) -> Result<S::Ok, S::Error> {
        let value: serde_json::Value =
            serde_json::from_str(&set.to_json()).map_err(serde::ser::Error::custom)?;
        value.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GroundingSet, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        GroundingSet::from_json(&value.to_string()).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_bytes_stable() {
        let params = ToyParams { n_scenes: 4, ..Default::default() };
        let a = generate_dataset(&params).unwrap();
        let b = generate_dataset(&params).unwrap();
        assert_eq!(a, b);

        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        a.save(dir1.path()).unwrap();
        b.save(dir2.path()).unwrap();
        for name in ["scenes.json", "codebook_vae.cagt", "codebook_vlm.cagt"] {
            let x = std::fs::read(dir1.path().join(name)).unwrap();
            let y = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between regenerations");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let params = ToyParams { n_scenes: 3, ..Default::default() };
        let a = generate_dataset(&params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let b = ToyDataset::load(dir.path()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn targets_replay_the_scene_program() {
        let params = ToyParams { n_scenes: 16, n_refs: 2, ..Default::default() };
        let ds = generate_dataset(&params).unwrap();
        let g = params.grid;
        for scene in &ds.scenes {
            // Replay: background plus each placement pasted at its rect.
            let mut replay = vec![0u8; g * g];
            for p in &scene.placements {
                let [r0, c0, r1, c1] = p.rect;
                for r in r0..r1 {
                    for c in c0..c1 {
                        replay[r * g + c] = p.code;
                        // The object must also be present in its reference grid.
                        assert_eq!(scene.ref_codes[p.ref_id][r * g + c], p.code);
                    }
                }
            }
            assert_eq!(replay, scene.target_codes, "scene {}", scene.id);
            // Every referential token has exactly one grounding.
            assert_eq!(scene.groundings.groundings.len(), params.n_refs);
        }
    }

    #[test]
    fn full_policy_covers_entire_reference() {
        let params =
            ToyParams { n_scenes: 2, bbox_policy: BboxPolicy::Full, ..Default::default() };
        let ds = generate_dataset(&params).unwrap();
        let px = ds.image_px();
        for scene in &ds.scenes {
            for g in &scene.groundings.groundings {
                assert_eq!(g.bbox_px, [0, 0, px, px]);
            }
        }
    }

    #[test]
    fn groundings_point_at_object_cells() {
        let params = ToyParams { n_scenes: 8, ..Default::default() };
        let ds = generate_dataset(&params).unwrap();
        let s = params.stride_px;
        for scene in &ds.scenes {
            for (g, p) in scene.groundings.groundings.iter().zip(&scene.placements) {
                let [r0, c0, r1, c1] = p.rect;
                assert_eq!(g.bbox_px, [c0 * s, r0 * s, c1 * s, r1 * s]);
                assert_eq!(g.ref_id, p.ref_id);
            }
        }
    }
}
