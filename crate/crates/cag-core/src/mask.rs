//! Correspondence-aware attention-mask compilation.
//!
//! A referential word's query rows are restricted to text keys, target keys,
//! and the reference VAE tokens inside the word's grounded bbox; reference
//! VLM tokens and out-of-bbox reference VAE tokens are excluded. Every other
//! row keeps the default key set (all tokens, minus all reference VAE
//! segments under VAE dropout). Rows are stored interval-compressed; the
//! dense boolean form exists for tests and export.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::GroundingSet;
use crate::layout::Layout;
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("grounding references vae_ref({0}) which is absent from the layout")]
    MissingSegment(usize),
    #[error("token stride {stride} does not divide image size {size:?}")]
    StrideMismatch { stride: usize, size: (usize, usize) },
    #[error("segment grid {grid:?} does not match image size {size:?} at stride {stride}")]
    GridMismatch { grid: (usize, usize), size: (usize, usize), stride: usize },
    #[error("vae_ref({0}) segment has no recorded image size")]
    MissingImageSize(usize),
    #[error("bbox {bbox:?} invalid for image size {size:?}")]
    BadBbox { bbox: [usize; 4], size: (usize, usize) },
    #[error("token span {span:?} exceeds text length {text_len}")]
    SpanOutOfRange { span: (usize, usize), text_len: usize },
    #[error("interval ({0}, {1}) exceeds n_tokens {2}")]
    IntervalOutOfRange(usize, usize, usize),
    #[error("mask row {0} is empty")]
    EmptyRow(usize),
    #[error("dense mask must be a square bool matrix, dims {0:?}")]
    NotSquareBool(Vec<usize>),
}

/// Sorted, disjoint, maximally merged half-open intervals over global token
/// indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSet {
    intervals: Vec<(usize, usize)>,
}

impl TokenSet {
    pub fn empty() -> TokenSet {
        TokenSet::default()
    }

    pub fn from_range(start: usize, end: usize) -> TokenSet {
        if start >= end {
            return TokenSet::empty();
        }
        TokenSet { intervals: vec![(start, end)] }
    }

    /// Normalizes arbitrary intervals: drops empties, sorts, merges.
    pub fn from_intervals(intervals: impl IntoIterator<Item = (usize, usize)>) -> TokenSet {
        let mut v: Vec<(usize, usize)> = intervals.into_iter().filter(|&(s, e)| s < e).collect();
        v.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(v.len());
        for (s, e) in v {
            match merged.last_mut() {
                Some((_, last_end)) if s <= *last_end => *last_end = (*last_end).max(e),
                _ => merged.push((s, e)),
            }
        }
        TokenSet { intervals: merged }
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }

    pub fn union(&self, other: &TokenSet) -> TokenSet {
        TokenSet::from_intervals(
            self.intervals.iter().chain(other.intervals.iter()).copied(),
        )
    }

    /// Set difference `self \ other`.
    pub fn subtract(&self, other: &TokenSet) -> TokenSet {
        let mut out = Vec::new();
        for &(s, e) in &self.intervals {
            let mut cursor = s;
            for &(os, oe) in &other.intervals {
                if oe <= cursor {
                    continue;
                }
                if os >= e {
                    break;
                }
                if os > cursor {
                    out.push((cursor, os.min(e)));
                }
                cursor = cursor.max(oe);
                if cursor >= e {
                    break;
                }
            }
            if cursor < e {
                out.push((cursor, e));
            }
        }
        TokenSet { intervals: out }
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.intervals
            .binary_search_by(|&(s, e)| {
                if idx < s {
                    std::cmp::Ordering::Greater
                } else if idx >= e {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .is_ok()
    }

    /// Number of member tokens.
    pub fn len(&self) -> usize {
        self.intervals.iter().map(|&(s, e)| e - s).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn iter_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.intervals.iter().flat_map(|&(s, e)| s..e)
    }

    /// One past the largest member, or 0 when empty.
    pub fn max_bound(&self) -> usize {
        self.intervals.last().map(|&(_, e)| e).unwrap_or(0)
    }
}

/// Per-query allowed-key sets: a shared default row plus overrides for
/// restricted queries. Overrides equal to the default row are dropped on
/// construction so equality is canonical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n_tokens: usize,
    pub default_row: TokenSet,
    pub overrides: BTreeMap<usize, TokenSet>,
}

impl AttentionMask {
    pub fn new(
        n_tokens: usize,
        default_row: TokenSet,
        overrides: BTreeMap<usize, TokenSet>,
    ) -> Result<AttentionMask, MaskError> {
        for set in std::iter::once(&default_row).chain(overrides.values()) {
            if set.max_bound() > n_tokens {
                let &(s, e) = set.intervals().last().expect("non-empty set has intervals");
                return Err(MaskError::IntervalOutOfRange(s, e, n_tokens));
            }
        }
        let overrides = overrides.into_iter().filter(|(_, set)| *set != default_row).collect();
        Ok(AttentionMask { n_tokens, default_row, overrides })
    }

    /// Mask with every key allowed for every query.
    pub fn all_allowed(n_tokens: usize) -> AttentionMask {
        AttentionMask {
            n_tokens,
            default_row: TokenSet::from_range(0, n_tokens),
            overrides: BTreeMap::new(),
        }
    }

    /// The allowed-key set of query `q`.
    pub fn row(&self, q: usize) -> &TokenSet {
        self.overrides.get(&q).unwrap_or(&self.default_row)
    }

    /// Errors if any query row is empty (a degenerate softmax row).
    pub fn check_rows_non_empty(&self) -> Result<(), MaskError> {
        if self.default_row.is_empty() && self.overrides.len() < self.n_tokens {
            let q = (0..self.n_tokens).find(|q| !self.overrides.contains_key(q)).unwrap_or(0);
            return Err(MaskError::EmptyRow(q));
        }
        for (&q, set) in &self.overrides {
            if set.is_empty() {
                return Err(MaskError::EmptyRow(q));
            }
        }
        Ok(())
    }

    /// Dense boolean form: `dense[q][k]` iff key `k` is allowed for query `q`.
    pub fn expand_dense(&self) -> Tensor {
        let n = self.n_tokens;
        let mut data = vec![false; n * n];
        for q in 0..n {
            let row = self.row(q);
            for &(s, e) in row.intervals() {
                data[q * n + s..q * n + e].fill(true);
            }
        }
        Tensor::from_bool(vec![n, n], data).expect("dense mask dims match data")
    }

    /// Inverse of [`expand_dense`]: recompresses a square boolean matrix,
    /// taking the most common row as the default.
    pub fn compress_dense(dense: &Tensor) -> Result<AttentionMask, MaskError> {
        let dims = dense.dims().to_vec();
        let (n, data) = match (dims.as_slice(), dense.as_bool()) {
            ([r, c], Some(data)) if r == c => (*r, data),
            _ => return Err(MaskError::NotSquareBool(dims)),
        };
        let mut rows: Vec<TokenSet> = Vec::with_capacity(n);
        for q in 0..n {
            let mut intervals = Vec::new();
            let mut start = None;
            for k in 0..n {
                match (data[q * n + k], start) {
                    (true, None) => start = Some(k),
                    (false, Some(s)) => {
                        intervals.push((s, k));
                        start = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = start {
                intervals.push((s, n));
            }
            rows.push(TokenSet { intervals });
        }
        // Most common row becomes the default; ties break toward the earliest.
        let mut counts: BTreeMap<&TokenSet, usize> = BTreeMap::new();
        let mut best: Option<(&TokenSet, usize)> = None;
        for row in &rows {
            let c = counts.entry(row).or_insert(0);
            *c += 1;
            match best {
                Some((_, bc)) if *c <= bc => {}
                _ => best = Some((row, *c)),
            }
        }
        let default_row = best.map(|(r, _)| r.clone()).unwrap_or_default();
        let overrides = rows
            .into_iter()
            .enumerate()
            .filter(|(_, r)| *r != default_row)
            .collect();
        AttentionMask::new(n, default_row, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MaskWire::from(self)).expect("mask serializes")
    }

    pub fn from_json(s: &str) -> Result<AttentionMask, MaskError> {
        let wire: MaskWire =
            serde_json::from_str(s).map_err(|e| MaskError::NotSquareBool(vec![e.line()]))?;
        wire.try_into()
    }
}

// BTreeMap over &TokenSet needs an ordering; any total order works for counting.
impl PartialOrd for TokenSet {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TokenSet {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.intervals.cmp(&other.intervals)
    }
}

/// Global indices of the `vae_ref(ref_id)` tokens whose patch footprint
/// intersects `bbox_px`, given `token_stride_px` image pixels per latent
/// token on both axes.
pub fn bbox_to_token_set(
    layout: &Layout,
    ref_id: usize,
    bbox_px: [usize; 4],
    token_stride_px: usize,
) -> Result<TokenSet, MaskError> {
    let seg = layout.vae_ref(ref_id).ok_or(MaskError::MissingSegment(ref_id))?;
    let size = seg.image_size.ok_or(MaskError::MissingImageSize(ref_id))?;
    let (h, w) = size;
    if token_stride_px == 0 || h % token_stride_px != 0 || w % token_stride_px != 0 {
        return Err(MaskError::StrideMismatch { stride: token_stride_px, size });
    }
    let (rows, cols) = seg.grid.expect("vae segments carry a grid");
    if rows != h / token_stride_px || cols != w / token_stride_px {
        return Err(MaskError::GridMismatch { grid: (rows, cols), size, stride: token_stride_px });
    }
    let [x1, y1, x2, y2] = bbox_px;
    if x1 >= x2 || y1 >= y2 || x2 > w || y2 > h {
        return Err(MaskError::BadBbox { bbox: bbox_px, size });
    }

    // Include every patch the bbox touches: floor on the near edge, ceil on
    // the far edge.
    let r0 = y1 / token_stride_px;
    let r1 = y2.div_ceil(token_stride_px); // exclusive
    let c0 = x1 / token_stride_px;
    let c1 = x2.div_ceil(token_stride_px); // exclusive

    let intervals =
        (r0..r1).map(|r| (seg.start + r * cols + c0, seg.start + r * cols + c1));
    Ok(TokenSet::from_intervals(intervals))
}

/// Compiles the correspondence mask for a layout and its groundings.
///
/// Instruction tokens covered by a referential word's spans are restricted
/// to text + target + that word's in-bbox reference tokens (union over
/// words sharing a token). With `drop_vae` the bbox component is omitted
/// and every reference VAE segment leaves the default row.
pub fn compile_mask(
    layout: &Layout,
    groundings: &GroundingSet,
    drop_vae: bool,
    token_stride_px: usize,
) -> Result<AttentionMask, MaskError> {
    let n = layout.total_len;
    let text = layout.vlm_text().map_err(|_| MaskError::MissingSegment(usize::MAX))?;
    let target = layout.vae_target().map_err(|_| MaskError::MissingSegment(usize::MAX))?;

    let mut default_row = TokenSet::from_range(0, n);
    if drop_vae {
        let vae_refs =
            TokenSet::from_intervals(layout.vae_ref_segments().map(|s| (s.start, s.end)));
        default_row = default_row.subtract(&vae_refs);
    }

    let base = TokenSet::from_range(text.start, text.end)
        .union(&TokenSet::from_range(target.start, target.end));

    let mut overrides: BTreeMap<usize, TokenSet> = BTreeMap::new();
    for g in &groundings.groundings {
        let allowed = if drop_vae {
            base.clone()
        } else {
            base.union(&bbox_to_token_set(layout, g.ref_id, g.bbox_px, token_stride_px)?)
        };
        for &(s, e) in &g.word.token_spans {
            if e > text.len() {
                return Err(MaskError::SpanOutOfRange { span: (s, e), text_len: text.len() });
            }
            for idx in s..e {
                let q = text.start + idx;
                let row = match overrides.remove(&q) {
                    // A token covered by several words keeps the union.
                    Some(prev) => prev.union(&allowed),
                    None => allowed.clone(),
                };
                overrides.insert(q, row);
            }
        }
    }

    AttentionMask::new(n, default_row, overrides)
}

// --- JSON wire form ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MaskWire {
    n_tokens: usize,
    default_row: Vec<[usize; 2]>,
    overrides: BTreeMap<String, Vec<[usize; 2]>>,
}

impl From<&AttentionMask> for MaskWire {
    fn from(m: &AttentionMask) -> Self {
        let pack = |set: &TokenSet| set.intervals().iter().map(|&(s, e)| [s, e]).collect();
        MaskWire {
            n_tokens: m.n_tokens,
            default_row: pack(&m.default_row),
            overrides: m.overrides.iter().map(|(q, set)| (q.to_string(), pack(set))).collect(),
        }
    }
}

impl TryFrom<MaskWire> for AttentionMask {
    type Error = MaskError;

    fn try_from(w: MaskWire) -> Result<AttentionMask, MaskError> {
        let unpack = |v: Vec<[usize; 2]>| TokenSet::from_intervals(v.into_iter().map(|[s, e]| (s, e)));
        let overrides = w
            .overrides
            .into_iter()
            .map(|(q, v)| {
                let q = q.parse::<usize>().map_err(|_| MaskError::NotSquareBool(vec![]))?;
                Ok((q, unpack(v)))
            })
            .collect::<Result<BTreeMap<_, _>, MaskError>>()?;
        AttentionMask::new(w.n_tokens, unpack(w.default_row), overrides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::{Grounding, ReferentialWord, Source};
    use crate::layout::Layout;

    #[test]
    fn token_set_normalizes_and_merges() {
        let s = TokenSet::from_intervals([(5, 7), (0, 2), (2, 5), (9, 9)]);
        assert_eq!(s.intervals(), &[(0, 7)]);
        assert_eq!(s.len(), 7);
        assert!(s.contains(6));
        assert!(!s.contains(7));
    }

    #[test]
    fn token_set_subtract() {
        let a = TokenSet::from_range(0, 10);
        let b = TokenSet::from_intervals([(2, 4), (7, 9)]);
        assert_eq!(a.subtract(&b).intervals(), &[(0, 2), (4, 7), (9, 10)]);
        assert_eq!(b.subtract(&a), TokenSet::empty());
    }

    /// Tiny layout from the compile example: VlmRef0 [0,2), VlmText [2,4),
    /// VaeTarget [4,8), VaeRef0 [8,12).
    fn tiny_layout() -> Layout {
        Layout::build(1, &[2], 2, (2, 2), &[(2, 2)], &[(32, 32)]).unwrap()
    }

    fn tiny_groundings() -> GroundingSet {
        GroundingSet {
            instruction: "place subj0".into(),
            groundings: vec![Grounding {
                word: ReferentialWord { text: "subj0".into(), token_spans: vec![(1, 2)] },
                ref_id: 0,
                // Stride 16 on a 32x32 image: top row of the 2x2 grid,
                // i.e. global tokens {8, 9}.
                bbox_px: [0, 0, 32, 16],
            }],
            source: Source::Stub,
        }
    }

    #[test]
    fn compile_matches_hand_worked_example() {
        let mask = compile_mask(&tiny_layout(), &tiny_groundings(), false, 16).unwrap();
        // Query 3 = text token index 1.
        assert_eq!(mask.row(3).intervals(), &[(2, 10)]);
        assert!(!mask.row(3).contains(0));
        assert!(!mask.row(3).contains(1));
        assert!(!mask.row(3).contains(10));
        assert!(!mask.row(3).contains(11));
        // Unrelated rows keep the default.
        assert_eq!(mask.row(2).intervals(), &[(0, 12)]);
        assert_eq!(mask.row(8).intervals(), &[(0, 12)]);
    }

    #[test]
    fn compile_with_drop_vae() {
        let mask = compile_mask(&tiny_layout(), &tiny_groundings(), true, 16).unwrap();
        assert_eq!(mask.default_row.intervals(), &[(0, 8)]);
        assert_eq!(mask.row(3).intervals(), &[(2, 8)]);
    }

    #[test]
    fn empty_groundings_give_all_ones_dense() {
        let set = GroundingSet { instruction: String::new(), groundings: vec![], source: Source::Stub };
        let mask = compile_mask(&tiny_layout(), &set, false, 16).unwrap();
        assert!(mask.overrides.is_empty());
        let dense = mask.expand_dense();
        assert!(dense.as_bool().unwrap().iter().all(|&b| b));
    }

    #[test]
    fn dense_expansion_counts() {
        let mask = compile_mask(&tiny_layout(), &tiny_groundings(), false, 16).unwrap();
        let dense = mask.expand_dense();
        let row3: Vec<bool> = dense.as_bool().unwrap()[3 * 12..4 * 12].to_vec();
        assert_eq!(row3.iter().filter(|&&b| b).count(), 2 + 4 + 2);
    }

    #[test]
    fn missing_segment_is_a_compile_error() {
        let layout = crate::layout::drop_vae_segments(&tiny_layout());
        let err = compile_mask(&layout, &tiny_groundings(), false, 16).unwrap_err();
        assert!(matches!(err, MaskError::MissingSegment(0)));
        // The dropped branch omits the bbox component instead of erroring.
        assert!(compile_mask(&layout, &tiny_groundings(), true, 16).is_ok());
    }

    fn grid_layout() -> Layout {
        // 512x512 image, stride 16 -> 32x32 grid.
        Layout::build(1, &[4], 3, (2, 2), &[(32, 32)], &[(512, 512)]).unwrap()
    }

    #[test]
    fn bbox_mapping_matches_patch_enumeration_oracle() {
        let layout = grid_layout();
        let seg = layout.vae_ref(0).unwrap();
        let bbox = [128usize, 128, 256, 256];
        let got = bbox_to_token_set(&layout, 0, bbox, 16).unwrap();

        // Oracle: enumerate all 1024 patches and test rectangle intersection.
        let mut expected = Vec::new();
        for r in 0..32 {
            for c in 0..32 {
                let (py1, py2) = (r * 16, (r + 1) * 16);
                let (px1, px2) = (c * 16, (c + 1) * 16);
                let overlaps =
                    px1 < bbox[2] && bbox[0] < px2 && py1 < bbox[3] && bbox[1] < py2;
                if overlaps {
                    expected.push(seg.start + r * 32 + c);
                }
            }
        }
        assert_eq!(expected.len(), 64); // rows 8..15, cols 8..15
        let got_indices: Vec<usize> = got.iter_indices().collect();
        assert_eq!(got_indices, expected);
    }

    #[test]
    fn full_image_bbox_is_one_interval() {
        let layout = grid_layout();
        let seg = layout.vae_ref(0).unwrap();
        let got = bbox_to_token_set(&layout, 0, [0, 0, 512, 512], 16).unwrap();
        assert_eq!(got.intervals(), &[(seg.start, seg.end)]);
        assert_eq!(got.len(), 1024);
    }

    #[test]
    fn sub_patch_bbox_maps_to_single_token() {
        let layout = grid_layout();
        let seg = layout.vae_ref(0).unwrap();
        let got = bbox_to_token_set(&layout, 0, [1, 1, 2, 2], 16).unwrap();
        assert_eq!(got.intervals(), &[(seg.start, seg.start + 1)]);
    }

    #[test]
    fn stride_must_divide_image_size() {
        let layout = grid_layout();
        assert!(matches!(
            bbox_to_token_set(&layout, 0, [0, 0, 16, 16], 24),
            Err(MaskError::StrideMismatch { .. })
        ));
        assert!(matches!(
            bbox_to_token_set(&layout, 9, [0, 0, 16, 16], 16),
            Err(MaskError::MissingSegment(9))
        ));
    }

    #[test]
    fn mask_json_round_trip() {
        let mask = compile_mask(&tiny_layout(), &tiny_groundings(), false, 16).unwrap();
        let back = AttentionMask::from_json(&mask.to_json()).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn compress_inverts_expand() {
        let mask = compile_mask(&tiny_layout(), &tiny_groundings(), false, 16).unwrap();
        let back = AttentionMask::compress_dense(&mask.expand_dense()).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn compile_is_monotone_in_groundings() {
        let layout = Layout::build(
            2,
            &[2, 2],
            4,
            (2, 2),
            &[(2, 2), (2, 2)],
            &[(32, 32), (32, 32)],
        )
        .unwrap();
        let g1 = GroundingSet {
            instruction: "a b c d".into(),
            groundings: vec![Grounding {
                word: ReferentialWord { text: "b".into(), token_spans: vec![(1, 2)] },
                ref_id: 0,
                bbox_px: [0, 0, 16, 16],
            }],
            source: Source::Stub,
        };
        let mut g2 = g1.clone();
        g2.groundings.push(Grounding {
            word: ReferentialWord { text: "c".into(), token_spans: vec![(2, 3)] },
            ref_id: 1,
            bbox_px: [16, 16, 32, 32],
        });
        let m1 = compile_mask(&layout, &g1, false, 16).unwrap();
        let m2 = compile_mask(&layout, &g2, false, 16).unwrap();
        // Adding a grounding only changes rows of the newly covered token.
        for q in 0..layout.total_len {
            let text_start = layout.vlm_text().unwrap().start;
            if q == text_start + 2 {
                assert_ne!(m1.row(q), m2.row(q));
            } else {
                assert_eq!(m1.row(q), m2.row(q));
            }
        }
    }
}
