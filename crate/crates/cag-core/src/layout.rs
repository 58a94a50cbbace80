//! Multi-stream token layout: concatenation order, segment ranges, and 2D
//! positions with diagonal chaining between image blocks.
//!
//! Segment order is fixed: per-reference VLM tokens, then instruction text,
//! then the target VAE grid, then per-reference VAE grids. Positions chain
//! diagonally: text token j sits at (j, j), the target grid starts at
//! (text_len, text_len), and each following VAE grid starts at (n+1, m+1)
//! of the previous grid's last token, so no two image tokens ever share a
//! position. VLM reference tokens occupy a reserved diagonal band at
//! negative indices ahead of the text, one run per reference in chain order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("n_refs must be at least 1, got {0}")]
    NoRefs(usize),
    #[error("{what} has length {got}, expected n_refs={expected}")]
    ListLength { what: &'static str, expected: usize, got: usize },
    #[error("{what} must be positive")]
    ZeroSize { what: &'static str },
    #[error("layout has no {0} segment")]
    MissingSegment(&'static str),
}

/// Which stream a segment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    VlmRef(usize),
    VlmText,
    VaeTarget,
    VaeRef(usize),
}

impl SegmentKind {
    pub fn is_vae_ref(self) -> bool {
        matches!(self, SegmentKind::VaeRef(_))
    }

    pub fn is_vlm_ref(self) -> bool {
        matches!(self, SegmentKind::VlmRef(_))
    }
}

/// A contiguous run of tokens from one stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Half-open [start, end) range into the global token sequence.
    pub start: usize,
    pub end: usize,
    /// (rows, cols) for image-derived grids.
    pub grid: Option<(usize, usize)>,
    /// (height_px, width_px) of the source image for VAE segments.
    pub image_size: Option<(usize, usize)>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Ordered token segments plus per-token (row, col) positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n_refs: usize,
    pub segments: Vec<Segment>,
    /// Per-token (row, col); empty until [`assign_positions`] runs.
    pub positions: Vec<(i64, i64)>,
    pub total_len: usize,
}

/// Builds the segment ranges in canonical order. Positions stay empty;
/// call [`assign_positions`] to fill them.
pub fn build_layout(
    n_refs: usize,
    vlm_ref_lens: &[usize],
    text_len: usize,
    target_grid: (usize, usize),
    ref_grids: &[(usize, usize)],
    ref_image_sizes: &[(usize, usize)],
) -> Result<Layout, LayoutError> {
    if n_refs == 0 {
        return Err(LayoutError::NoRefs(0));
    }
    for (what, got) in [
        ("vlm_ref_lens", vlm_ref_lens.len()),
        ("ref_grids", ref_grids.len()),
        ("ref_image_sizes", ref_image_sizes.len()),
    ] {
        if got != n_refs {
            return Err(LayoutError::ListLength { what, expected: n_refs, got });
        }
    }
    if text_len == 0 {
        return Err(LayoutError::ZeroSize { what: "text_len" });
    }
    if vlm_ref_lens.iter().any(|&l| l == 0) {
        return Err(LayoutError::ZeroSize { what: "vlm_ref_lens entry" });
    }
    if target_grid.0 == 0 || target_grid.1 == 0 {
        return Err(LayoutError::ZeroSize { what: "target_grid" });
    }
    if ref_grids.iter().any(|&(r, c)| r == 0 || c == 0) {
        return Err(LayoutError::ZeroSize { what: "ref_grids entry" });
    }
    if ref_image_sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
        return Err(LayoutError::ZeroSize { what: "ref_image_sizes entry" });
    }

    let mut segments = Vec::with_capacity(2 * n_refs + 2);
    let mut cursor = 0usize;
    let mut push = |kind, len, grid, image_size, cursor: &mut usize| {
        segments.push(Segment { kind, start: *cursor, end: *cursor + len, grid, image_size });
        *cursor += len;
    };
    for (i, &len) in vlm_ref_lens.iter().enumerate() {
        push(SegmentKind::VlmRef(i), len, None, None, &mut cursor);
    }
    push(SegmentKind::VlmText, text_len, None, None, &mut cursor);
    push(
        SegmentKind::VaeTarget,
        target_grid.0 * target_grid.1,
        Some(target_grid),
        None,
        &mut cursor,
    );
    for (i, (&grid, &size)) in ref_grids.iter().zip(ref_image_sizes).enumerate() {
        push(SegmentKind::VaeRef(i), grid.0 * grid.1, Some(grid), Some(size), &mut cursor);
    }

    Ok(Layout { n_refs, segments, positions: Vec::new(), total_len: cursor })
}

/// Fills per-token positions. Text token j gets (j, j); the target grid is
/// row-major from (text_len, text_len); each VAE reference grid starts at
/// (n+1, m+1) of the previous image block's last token; VLM reference runs
/// occupy the diagonal band at negative indices immediately before the text.
pub fn assign_positions(mut layout: Layout) -> Layout {
    let mut positions = vec![(0i64, 0i64); layout.total_len];

    let vlm_band: usize = layout
        .segments
        .iter()
        .filter(|s| s.kind.is_vlm_ref())
        .map(Segment::len)
        .sum();
    let mut band_slot = -(vlm_band as i64);
    // Chain origin for the next image grid; starts after the text diagonal.
    let mut next_origin: Option<(i64, i64)> = None;

    for seg in &layout.segments {
        match seg.kind {
            SegmentKind::VlmRef(_) => {
                for t in seg.start..seg.end {
                    positions[t] = (band_slot, band_slot);
                    band_slot += 1;
                }
            }
            SegmentKind::VlmText => {
                for (j, t) in (seg.start..seg.end).enumerate() {
                    positions[t] = (j as i64, j as i64);
                }
                let text_len = seg.len() as i64;
                next_origin = Some((text_len, text_len));
            }
            SegmentKind::VaeTarget | SegmentKind::VaeRef(_) => {
                let (rows, cols) = seg.grid.expect("image segment has a grid");
                let (orow, ocol) = next_origin.expect("text precedes image segments");
                for t in seg.start..seg.end {
                    let i = t - seg.start;
                    positions[t] = (orow + (i / cols) as i64, ocol + (i % cols) as i64);
                }
                let last = (orow + rows as i64 - 1, ocol + cols as i64 - 1);
                next_origin = Some((last.0 + 1, last.1 + 1));
            }
        }
    }

    layout.positions = positions;
    layout
}

/// Rebuilds a layout without its VAE reference segments (same VLM band,
/// text, and target positions); used when reference VAE features are
/// dropped from the conditioning set.
pub fn drop_vae_segments(layout: &Layout) -> Layout {
    let had_positions = !layout.positions.is_empty();
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    for seg in &layout.segments {
        if seg.kind.is_vae_ref() {
            continue;
        }
        let len = seg.len();
        segments.push(Segment { start: cursor, end: cursor + len, ..seg.clone() });
        cursor += len;
    }
    let dropped = Layout {
        n_refs: layout.n_refs,
        segments,
        positions: Vec::new(),
        total_len: cursor,
    };
    if had_positions {
        assign_positions(dropped)
    } else {
        dropped
    }
}

impl Layout {
    /// Builds segments and assigns positions in one step.
    pub fn build(
        n_refs: usize,
        vlm_ref_lens: &[usize],
        text_len: usize,
        target_grid: (usize, usize),
        ref_grids: &[(usize, usize)],
        ref_image_sizes: &[(usize, usize)],
    ) -> Result<Layout, LayoutError> {
        Ok(assign_positions(build_layout(
            n_refs,
            vlm_ref_lens,
            text_len,
            target_grid,
            ref_grids,
            ref_image_sizes,
        )?))
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn vlm_text(&self) -> Result<&Segment, LayoutError> {
        self.segment(SegmentKind::VlmText).ok_or(LayoutError::MissingSegment("vlm_text"))
    }

    pub fn vae_target(&self) -> Result<&Segment, LayoutError> {
        self.segment(SegmentKind::VaeTarget).ok_or(LayoutError::MissingSegment("vae_target"))
    }

    pub fn vae_ref(&self, i: usize) -> Option<&Segment> {
        self.segment(SegmentKind::VaeRef(i))
    }

    pub fn vae_ref_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind.is_vae_ref())
    }

    pub fn has_vae_refs(&self) -> bool {
        self.segments.iter().any(|s| s.kind.is_vae_ref())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LayoutWire::from(self)).expect("layout serializes")
    }

    pub fn from_json(s: &str) -> Result<Layout, serde_json::Error> {
        let wire: LayoutWire = serde_json::from_str(s)?;
        Ok(wire.into())
    }
}

// --- JSON wire form ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SegmentWire {
    kind: String,
    ref_id: Option<usize>,
    start: usize,
    end: usize,
    grid: Option<[usize; 2]>,
    image_size: Option<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct LayoutWire {
    n_refs: usize,
    total_len: usize,
    segments: Vec<SegmentWire>,
    positions: Vec<[i64; 2]>,
}

impl From<&Layout> for LayoutWire {
    fn from(l: &Layout) -> Self {
        LayoutWire {
            n_refs: l.n_refs,
            total_len: l.total_len,
            segments: l
                .segments
                .iter()
                .map(|s| {
                    let (kind, ref_id) = match s.kind {
                        SegmentKind::VlmRef(i) => ("vlm_ref", Some(i)),
                        SegmentKind::VlmText => ("vlm_text", None),
                        SegmentKind::VaeTarget => ("vae_target", None),
                        SegmentKind::VaeRef(i) => ("vae_ref", Some(i)),
                    };
                    SegmentWire {
                        kind: kind.to_string(),
                        ref_id,
                        start: s.start,
                        end: s.end,
                        grid: s.grid.map(|(r, c)| [r, c]),
                        image_size: s.image_size.map(|(h, w)| [h, w]),
                    }
                })
                .collect(),
            positions: l.positions.iter().map(|&(r, c)| [r, c]).collect(),
        }
    }
}

impl From<LayoutWire> for Layout {
    fn from(w: LayoutWire) -> Self {
        Layout {
            n_refs: w.n_refs,
            segments: w
                .segments
                .into_iter()
                .map(|s| Segment {
                    kind: match (s.kind.as_str(), s.ref_id) {
                        ("vlm_ref", Some(i)) => SegmentKind::VlmRef(i),
                        ("vae_ref", Some(i)) => SegmentKind::VaeRef(i),
                        ("vae_target", _) => SegmentKind::VaeTarget,
                        _ => SegmentKind::VlmText,
                    },
                    start: s.start,
                    end: s.end,
                    grid: s.grid.map(|[r, c]| (r, c)),
                    image_size: s.image_size.map(|[h, w]| (h, w)),
                })
                .collect(),
            positions: w.positions.into_iter().map(|[r, c]| (r, c)).collect(),
            total_len: w.total_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec_example() -> Layout {
        Layout::build(
            2,
            &[64, 64],
            12,
            (32, 32),
            &[(32, 32), (32, 32)],
            &[(512, 512), (512, 512)],
        )
        .unwrap()
    }

    #[test]
    fn segment_sizes_and_order() {
        let l = spec_example();
        assert_eq!(l.total_len, 64 + 64 + 12 + 1024 + 1024 + 1024);
        assert_eq!(l.total_len, 3212);
        let kinds: Vec<_> = l.segments.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![
                SegmentKind::VlmRef(0),
                SegmentKind::VlmRef(1),
                SegmentKind::VlmText,
                SegmentKind::VaeTarget,
                SegmentKind::VaeRef(0),
                SegmentKind::VaeRef(1),
            ]
        );
    }

    #[test]
    fn minimal_layout() {
        let l = Layout::build(1, &[1], 1, (1, 1), &[(1, 1)], &[(16, 16)]).unwrap();
        assert_eq!(l.total_len, 4);
    }

    #[test]
    fn segments_partition_the_sequence() {
        let l = spec_example();
        // Brute-force range partition: each index covered exactly once.
        let mut covered = vec![0u32; l.total_len];
        for s in &l.segments {
            assert!(s.start < s.end);
            for t in s.start..s.end {
                covered[t] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn text_and_target_positions_follow_the_diagonal_rule() {
        let l = Layout::build(1, &[2], 3, (2, 2), &[(2, 2)], &[(32, 32)]).unwrap();
        let text = l.vlm_text().unwrap();
        for (j, t) in (text.start..text.end).enumerate() {
            assert_eq!(l.positions[t], (j as i64, j as i64));
        }
        let target = l.vae_target().unwrap();
        let got: Vec<_> = (target.start..target.end).map(|t| l.positions[t]).collect();
        assert_eq!(got, vec![(3, 3), (3, 4), (4, 3), (4, 4)]);
        let r0 = l.vae_ref(0).unwrap();
        assert_eq!(l.positions[r0.start], (5, 5));
    }

    #[test]
    fn consecutive_references_offset_by_one_one() {
        let l =
            Layout::build(2, &[1, 1], 2, (3, 3), &[(2, 2), (2, 2)], &[(32, 32), (32, 32)]).unwrap();
        let r0 = l.vae_ref(0).unwrap();
        let r1 = l.vae_ref(1).unwrap();
        let last0 = l.positions[r0.end - 1];
        let first1 = l.positions[r1.start];
        assert_eq!(first1, (last0.0 + 1, last0.1 + 1));
        // Same law at the target -> first reference boundary.
        let target = l.vae_target().unwrap();
        let last_t = l.positions[target.end - 1];
        assert_eq!(l.positions[r0.start], (last_t.0 + 1, last_t.1 + 1));
    }

    #[test]
    fn image_positions_never_collide() {
        // Scaled-down version of the exhaustive acceptance sweep.
        for n_refs in 1..=3usize {
            for tdim in [1usize, 3] {
                for rdim in [1usize, 2, 4] {
                    let grids = vec![(rdim, rdim + 1); n_refs];
                    let sizes = vec![(rdim * 8, (rdim + 1) * 8); n_refs];
                    let l = Layout::build(
                        n_refs,
                        &vec![2; n_refs],
                        2,
                        (tdim, tdim + 1),
                        &grids,
                        &sizes,
                    )
                    .unwrap();
                    let mut seen = HashSet::new();
                    for s in l.segments.iter().filter(|s| s.grid.is_some()) {
                        for t in s.start..s.end {
                            assert!(seen.insert(l.positions[t]), "collision at {:?}", l.positions[t]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn vlm_band_sits_before_the_text_and_never_collides() {
        let l = spec_example();
        let mut seen = HashSet::new();
        for s in &l.segments {
            for t in s.start..s.end {
                if s.kind.is_vlm_ref() {
                    let (r, c) = l.positions[t];
                    assert_eq!(r, c);
                    assert!(r < 0, "band slot {r} must precede the text diagonal");
                }
                assert!(seen.insert(l.positions[t]) || s.kind == SegmentKind::VlmText);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(spec_example(), spec_example());
    }

    #[test]
    fn list_length_mismatch_is_an_error() {
        let err = build_layout(2, &[4], 3, (2, 2), &[(2, 2), (2, 2)], &[(32, 32), (32, 32)])
            .unwrap_err();
        assert!(matches!(err, LayoutError::ListLength { .. }));
    }

    #[test]
    fn zero_grid_is_an_error() {
        let err = build_layout(1, &[4], 3, (0, 2), &[(2, 2)], &[(32, 32)]).unwrap_err();
        assert!(matches!(err, LayoutError::ZeroSize { .. }));
    }

    #[test]
    fn dropped_layout_has_no_vae_refs() {
        let l = spec_example();
        let d = drop_vae_segments(&l);
        assert!(!d.has_vae_refs());
        assert_eq!(d.total_len, 64 + 64 + 12 + 1024);
        assert_eq!(d.positions.len(), d.total_len);
        // Shared prefix keeps identical positions.
        assert_eq!(&d.positions[..], &l.positions[..d.total_len]);
    }

    #[test]
    fn json_round_trip() {
        let l = spec_example();
        let back = Layout::from_json(&l.to_json()).unwrap();
        assert_eq!(back, l);
    }
}
