//! Masked multi-head attention: forward with cached probabilities and the
//! analytic backward pass.
//!
//! The mask enters as an additive 0/-inf bias before the softmax, one code
//! path for every row; gather-then-attend over the allowed keys is kept as
//! a test oracle. Disallowed keys get exactly zero weight and exactly zero
//! gradient through their logits.

use crate::numerics::{
    matmul_into, matmul_nt_into, matmul_tn_into, softmax_rows_in_place, FloatElem, NumericsError,
};

use super::rope::{apply_rope2d, apply_rope2d_transpose};
use super::{AttentionConfig, AttentionError, AttentionIo};

fn extract_head<T: FloatElem>(x: &[T], n: usize, d: usize, head: usize, h: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * h];
    for t in 0..n {
        out[t * h..(t + 1) * h].copy_from_slice(&x[t * d + head * h..t * d + head * h + h]);
    }
    out
}

fn scatter_head<T: FloatElem>(dst: &mut [T], src: &[T], n: usize, d: usize, head: usize, h: usize) {
    for t in 0..n {
        dst[t * d + head * h..t * d + head * h + h].copy_from_slice(&src[t * h..(t + 1) * h]);
    }
}

/// Forward state retained for the backward pass.
pub struct AttentionCache<T> {
    /// Rotated queries and keys, `n x d_model`.
    pub q_roped: Vec<T>,
    pub k_roped: Vec<T>,
    /// Softmax probabilities, `n_heads x n x n`, head-major.
    pub probs: Vec<T>,
    pub n: usize,
}

impl<T: FloatElem> AttentionCache<T> {
    /// Probability matrix of one head, row-major `n x n`.
    pub fn head_probs(&self, head: usize) -> &[T] {
        &self.probs[head * self.n * self.n..(head + 1) * self.n * self.n]
    }
}

fn check_io<T>(io: &AttentionIo<'_, T>, cfg: &AttentionConfig) -> Result<usize, AttentionError> {
    cfg.validate()?;
    let n = io.positions.len();
    for (what, len) in [("q", io.q.len()), ("k", io.k.len()), ("v", io.v.len())] {
        if len != n * cfg.d_model {
            return Err(AttentionError::ShapeMismatch {
                what,
                expected: n * cfg.d_model,
                got: len,
            });
        }
    }
    if io.mask.n_tokens != n {
        return Err(AttentionError::ShapeMismatch {
            what: "mask.n_tokens",
            expected: n,
            got: io.mask.n_tokens,
        });
    }
    io.mask.check_rows_non_empty()?;
    Ok(n)
}

/// Masked attention with the cache needed for [`attention_backward`].
pub fn masked_attention_cached<T: FloatElem>(
    io: &AttentionIo<'_, T>,
    cfg: &AttentionConfig,
) -> Result<(Vec<T>, AttentionCache<T>), AttentionError> {
    let n = check_io(io, cfg)?;
    let d = cfg.d_model;
    let h = cfg.head_dim();
    let scale = T::from_f64(1.0 / (h as f64).sqrt());

    let q_roped = apply_rope2d(io.q, io.positions, cfg)?;
    let k_roped = apply_rope2d(io.k, io.positions, cfg)?;

    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); cfg.n_heads * n * n];

    for head in 0..cfg.n_heads {
        let qh = extract_head(&q_roped, n, d, head, h);
        let kh = extract_head(&k_roped, n, d, head, h);
        let vh = extract_head(io.v, n, d, head, h);

        let scores = &mut probs[head * n * n..(head + 1) * n * n];
        matmul_nt_into(&qh, &kh, n, h, n, scores);
        for s in scores.iter_mut() {
            *s = *s * scale;
        }
        // Additive mask bias: disallowed keys get -inf.
        for q in 0..n {
            let row = &mut scores[q * n..(q + 1) * n];
            let mut cursor = 0usize;
            for &(s, e) in io.mask.row(q).intervals() {
                row[cursor..s].fill(T::neg_infinity());
                cursor = e;
            }
            row[cursor..].fill(T::neg_infinity());
        }
        softmax_rows_in_place(scores, n, n, 0).map_err(|e| match e {
            NumericsError::DegenerateRow { row } => {
                AttentionError::Mask(crate::mask::MaskError::EmptyRow(row))
            }
            _ => AttentionError::ShapeMismatch { what: "softmax", expected: n, got: 0 },
        })?;

        let mut out_h = vec![T::zero(); n * h];
        matmul_into(scores, &vh, n, n, h, &mut out_h);
        scatter_head(&mut out, &out_h, n, d, head, h);
    }

    Ok((out, AttentionCache { q_roped, k_roped, probs, n }))
}

/// Masked attention output only.
pub fn masked_attention<T: FloatElem>(
    io: &AttentionIo<'_, T>,
    cfg: &AttentionConfig,
) -> Result<Vec<T>, AttentionError> {
    masked_attention_cached(io, cfg).map(|(out, _)| out)
}

/// Analytic gradients of [`masked_attention`] w.r.t. q, k, v.
pub fn attention_backward<T: FloatElem>(
    io: &AttentionIo<'_, T>,
    cfg: &AttentionConfig,
    cache: &AttentionCache<T>,
    upstream: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>), AttentionError> {
    let n = check_io(io, cfg)?;
    let d = cfg.d_model;
    let h = cfg.head_dim();
    if upstream.len() != n * d {
        return Err(AttentionError::ShapeMismatch {
            what: "upstream grad",
            expected: n * d,
            got: upstream.len(),
        });
    }
    let scale = T::from_f64(1.0 / (h as f64).sqrt());

    let mut dq_roped = vec![T::zero(); n * d];
    let mut dk_roped = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];

    for head in 0..cfg.n_heads {
        let qh = extract_head(&cache.q_roped, n, d, head, h);
        let kh = extract_head(&cache.k_roped, n, d, head, h);
        let vh = extract_head(io.v, n, d, head, h);
        let gh = extract_head(upstream, n, d, head, h);
        let p = cache.head_probs(head);

        // dV = P^T g
        let mut dvh = vec![T::zero(); n * h];
        matmul_tn_into(p, &gh, n, n, h, &mut dvh);
        scatter_head(&mut dv, &dvh, n, d, head, h);

        // dP = g V^T
        let mut dp = vec![T::zero(); n * n];
        matmul_nt_into(&gh, &vh, n, h, n, &mut dp);

        // Softmax backward rowwise; zero probability keeps exactly zero
        // gradient at masked logits.
        let mut ds = dp;
        for q in 0..n {
            let p_row = &p[q * n..(q + 1) * n];
            let ds_row = &mut ds[q * n..(q + 1) * n];
            let mut dot = T::zero();
            for (dp_j, p_j) in ds_row.iter().zip(p_row) {
                dot = dot + *dp_j * *p_j;
            }
            for (ds_j, p_j) in ds_row.iter_mut().zip(p_row) {
                *ds_j = *p_j * (*ds_j - dot) * scale;
            }
        }

        // dQr = dS Kr, dKr = dS^T Qr
        let mut dqh = vec![T::zero(); n * h];
        matmul_into(&ds, &kh, n, n, h, &mut dqh);
        scatter_head(&mut dq_roped, &dqh, n, d, head, h);

        let mut dkh = vec![T::zero(); n * h];
        matmul_tn_into(&ds, &qh, n, n, h, &mut dkh);
        scatter_head(&mut dk_roped, &dkh, n, d, head, h);
    }

    let dq = apply_rope2d_transpose(&dq_roped, io.positions, cfg)?;
    let dk = apply_rope2d_transpose(&dk_roped, io.positions, cfg)?;
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{AttentionMask, TokenSet};
    use crate::numerics::RngKey;
    use std::collections::BTreeMap;

    fn cfg() -> AttentionConfig {
        AttentionConfig::new(8, 2, 10_000.0).unwrap()
    }

    fn randn(n: usize, label: &str, seed: u64) -> Vec<f64> {
        let key = RngKey::new(seed).substream(label);
        (0..n).map(|i| key.at(i as u64).normal()).collect()
    }

    #[test]
    fn identical_keys_average_values() {
        let c = cfg();
        let q = randn(2 * 8, "q", 1);
        let k: Vec<f64> = randn(8, "k", 1).into_iter().chain(randn(8, "k", 1)).collect();
        let v = randn(2 * 8, "v", 1);
        // Same position for both keys so rope keeps them identical.
        let positions = [(0, 0), (0, 0)];
        let mask = AttentionMask::all_allowed(2);
        let io = AttentionIo { q: &q, k: &k, v: &v, positions: &positions, mask: &mask };
        let out = masked_attention(&io, &c).unwrap();
        for t in 0..2 {
            for j in 0..8 {
                let mean = 0.5 * (v[j] + v[8 + j]);
                assert!((out[t * 8 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_mask_gathers_values_exactly() {
        let c = cfg();
        let n = 4;
        let q = randn(n * 8, "q", 2);
        let k = randn(n * 8, "k", 2);
        let v = randn(n * 8, "v", 2);
        let positions: Vec<(i64, i64)> = (0..n as i64).map(|i| (i, 2 * i)).collect();
        // Query t is allowed to see only key (t+1) % n.
        let overrides: BTreeMap<usize, TokenSet> =
            (0..n).map(|t| (t, TokenSet::from_range((t + 1) % n, (t + 1) % n + 1))).collect();
        let mask = AttentionMask::new(n, TokenSet::from_range(0, n), overrides).unwrap();
        let io = AttentionIo { q: &q, k: &k, v: &v, positions: &positions, mask: &mask };
        let out = masked_attention(&io, &c).unwrap();
        for t in 0..n {
            let src = (t + 1) % n;
            for j in 0..8 {
                assert!((out[t * 8 + j] - v[src * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_mask_row_is_surfaced() {
        let c = cfg();
        let n = 2;
        let q = randn(n * 8, "q", 3);
        let positions = [(0, 0), (1, 1)];
        let mut overrides = BTreeMap::new();
        overrides.insert(1usize, TokenSet::empty());
        let mask = AttentionMask::new(n, TokenSet::from_range(0, n), overrides).unwrap();
        let io = AttentionIo { q: &q, k: &q, v: &q, positions: &positions, mask: &mask };
        assert!(matches!(
            masked_attention(&io, &c),
            Err(AttentionError::Mask(crate::mask::MaskError::EmptyRow(1)))
        ));
    }

    #[test]
    fn rows_are_stochastic() {
        let c = cfg();
        let n = 6;
        let q = randn(n * 8, "q", 4);
        let k = randn(n * 8, "k", 4);
        let v = randn(n * 8, "v", 4);
        let positions: Vec<(i64, i64)> = (0..n as i64).map(|i| (i, i)).collect();
        let mask = AttentionMask::all_allowed(n);
        let io = AttentionIo { q: &q, k: &k, v: &v, positions: &positions, mask: &mask };
        let (_, cache) = masked_attention_cached(&io, &c).unwrap();
        for head in 0..2 {
            let p = cache.head_probs(head);
            for row in 0..n {
                let s: f64 = p[row * n..(row + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let c = cfg();
        let n = 3;
        let q = randn(n * 8, "q", 5);
        let k = randn(n * 8, "k", 5);
        let v = randn(n * 8, "v", 5);
        let positions: Vec<(i64, i64)> = (0..n as i64).map(|i| (i, i + 1)).collect();
        let mask = AttentionMask::all_allowed(n);
        let io = AttentionIo { q: &q, k: &k, v: &v, positions: &positions, mask: &mask };
        let (_, cache) = masked_attention_cached(&io, &c).unwrap();
        let (dq, dk, dv) =
            attention_backward(&io, &c, &cache, &vec![0.0; n * 8]).unwrap();
        assert!(dq.iter().chain(&dk).chain(&dv).all(|&g| g == 0.0));
    }

    #[test]
    fn perturbing_a_masked_key_leaves_output_unchanged() {
        let c = cfg();
        let n = 4;
        let q = randn(n * 8, "q", 6);
        let k = randn(n * 8, "k", 6);
        let v = randn(n * 8, "v", 6);
        let positions: Vec<(i64, i64)> = (0..n as i64).map(|i| (i, i)).collect();
        // No row may see key 2.
        let default = TokenSet::from_intervals([(0, 2), (3, n)]);
        let mask = AttentionMask::new(n, default, BTreeMap::new()).unwrap();
        let io = AttentionIo { q: &q, k: &k, v: &v, positions: &positions, mask: &mask };
        let base = masked_attention(&io, &c).unwrap();

        let mut k2 = k.clone();
        for j in 0..8 {
            k2[2 * 8 + j] += 10.0;
        }
        let io2 = AttentionIo { q: &q, k: &k2, v: &v, positions: &positions, mask: &mask };
        let bumped = masked_attention(&io2, &c).unwrap();
        assert_eq!(base, bumped);
    }

    #[test]
    fn deterministic_outputs() {
        let c = cfg();
        let n = 5;
        let q = randn(n * 8, "q", 7);
        let positions: Vec<(i64, i64)> = (0..n as i64).map(|i| (2 * i, i)).collect();
        let mask = AttentionMask::all_allowed(n);
        let io = AttentionIo { q: &q, k: &q, v: &q, positions: &positions, mask: &mask };
        let a = masked_attention(&io, &c).unwrap();
        let b = masked_attention(&io, &c).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
