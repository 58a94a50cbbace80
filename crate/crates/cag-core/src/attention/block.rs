//! Pre-norm transformer block over the concatenated token sequence:
//! rmsnorm -> masked attention -> residual -> rmsnorm -> feed-forward ->
//! residual, with the same correspondence mask at every layer. Forward and
//! backward are explicit; zero-initialized output projections make a fresh
//! block the identity map.

use serde::{Deserialize, Serialize};

use crate::mask::AttentionMask;
use crate::numerics::{matmul_into, matmul_nt_into, matmul_tn_into, FloatElem, RngKey};

use super::core::{attention_backward, masked_attention_cached, AttentionCache};
use super::{AttentionConfig, AttentionError, AttentionIo};

/// Block geometry; `attn` carries d_model / heads / rope base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub attn: AttentionConfig,
    pub d_ff: usize,
    pub rms_eps: f64,
}

/// Learnable weights of one block. Projections are bias-free; norms carry
/// no affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub w1: Vec<T>,
    pub w2: Vec<T>,
}

impl<T: FloatElem> BlockWeights<T> {
    /// Small random q/k/v and ffn-in; zero output projections, so the block
    /// starts as the identity map.
    pub fn init(cfg: &BlockConfig, key: &RngKey, init_std: f64) -> BlockWeights<T> {
        let d = cfg.attn.d_model;
        let randn = |label: &str, len: usize| -> Vec<T> {
            let k = key.substream(label);
            (0..len).map(|i| T::from_f64(init_std * k.at(i as u64).normal())).collect()
        };
        BlockWeights {
            wq: randn("wq", d * d),
            wk: randn("wk", d * d),
            wv: randn("wv", d * d),
            wo: vec![T::zero(); d * d],
            w1: randn("w1", d * cfg.d_ff),
            w2: vec![T::zero(); cfg.d_ff * d],
        }
    }

    pub fn zeros(cfg: &BlockConfig) -> BlockWeights<T> {
        let d = cfg.attn.d_model;
        BlockWeights {
            wq: vec![T::zero(); d * d],
            wk: vec![T::zero(); d * d],
            wv: vec![T::zero(); d * d],
            wo: vec![T::zero(); d * d],
            w1: vec![T::zero(); d * cfg.d_ff],
            w2: vec![T::zero(); cfg.d_ff * d],
        }
    }
}

/// Gradients with the same shape as [`BlockWeights`].
pub type BlockGrads<T> = BlockWeights<T>;

/// Forward state for the backward pass.
pub struct BlockCache<T> {
    rms1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: AttentionCache<T>,
    attn_out: Vec<T>,
    rms2: Vec<T>,
    b: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

impl<T: FloatElem> BlockCache<T> {
    /// Attention probabilities of one head, row-major `n x n`.
    pub fn head_probs(&self, head: usize) -> &[T] {
        self.attn.head_probs(head)
    }
}

/// Row-wise rms normalization `x / sqrt(mean(x^2) + eps)`. Returns the
/// normalized rows and the per-row rms for the backward pass.
pub fn rms_norm_rows<T: FloatElem>(x: &[T], cols: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let mut out = vec![T::zero(); x.len()];
    let mut rms = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut sq = T::zero();
        for &v in row {
            sq = sq + v * v;
        }
        let m = sq / T::from_f64(cols as f64) + T::from_f64(eps);
        let inv = m.sqrt().recip();
        rms[r] = m.sqrt();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v * inv;
        }
    }
    (out, rms)
}

/// Backward of [`rms_norm_rows`]: `dx = (dy - y * mean(dy*y)) / rms`.
pub fn rms_norm_backward<T: FloatElem>(dy: &[T], y: &[T], rms: &[T], cols: usize) -> Vec<T> {
    let rows = dy.len() / cols;
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..rows {
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let y_row = &y[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for (g, v) in dy_row.iter().zip(y_row) {
            dot = dot + *g * *v;
        }
        let mean = dot / T::from_f64(cols as f64);
        let inv = rms[r].recip();
        for ((o, g), v) in dx[r * cols..(r + 1) * cols].iter_mut().zip(dy_row).zip(y_row) {
            *o = (*g - *v * mean) * inv;
        }
    }
    dx
}

const GELU_C: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu<T: FloatElem>(x: T) -> T {
    let xf = x.to_f64();
    let u = (2.0 / std::f64::consts::PI).sqrt() * (xf + GELU_C * xf * xf * xf);
    T::from_f64(0.5 * xf * (1.0 + u.tanh()))
}

pub fn gelu_derivative<T: FloatElem>(x: T) -> T {
    let xf = x.to_f64();
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (xf + GELU_C * xf * xf * xf);
    let t = u.tanh();
    T::from_f64(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * xf * xf))
}

/// One block forward. `x` is row-major `n x d_model`.
pub fn block_forward<T: FloatElem>(
    x: &[T],
    positions: &[(i64, i64)],
    mask: &AttentionMask,
    weights: &BlockWeights<T>,
    cfg: &BlockConfig,
) -> Result<(Vec<T>, BlockCache<T>), AttentionError> {
    let d = cfg.attn.d_model;
    let n = positions.len();
    if x.len() != n * d {
        return Err(AttentionError::ShapeMismatch {
            what: "block input",
            expected: n * d,
            got: x.len(),
        });
    }

    let (a, rms1) = rms_norm_rows(x, d, cfg.rms_eps);
    let mut q = vec![T::zero(); n * d];
    let mut k = vec![T::zero(); n * d];
    let mut v = vec![T::zero(); n * d];
    matmul_into(&a, &weights.wq, n, d, d, &mut q);
    matmul_into(&a, &weights.wk, n, d, d, &mut k);
    matmul_into(&a, &weights.wv, n, d, d, &mut v);

    let io = AttentionIo { q: &q, k: &k, v: &v, positions, mask };
    let (attn_out, attn) = masked_attention_cached(&io, &cfg.attn)?;

    let mut o = vec![T::zero(); n * d];
    matmul_into(&attn_out, &weights.wo, n, d, d, &mut o);
    let x1: Vec<T> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();

    let (b, rms2) = rms_norm_rows(&x1, d, cfg.rms_eps);
    let mut h_pre = vec![T::zero(); n * cfg.d_ff];
    matmul_into(&b, &weights.w1, n, d, cfg.d_ff, &mut h_pre);
    let h_act: Vec<T> = h_pre.iter().map(|&h| gelu(h)).collect();
    let mut f = vec![T::zero(); n * d];
    matmul_into(&h_act, &weights.w2, n, cfg.d_ff, d, &mut f);
    let y: Vec<T> = x1.iter().zip(&f).map(|(&a, &b)| a + b).collect();

    Ok((y, BlockCache { rms1, a, q, k, v, attn, attn_out, rms2, b, h_pre, h_act }))
}

/// One block backward: gradients w.r.t. the block input and all weights.
pub fn block_backward<T: FloatElem>(
    upstream: &[T],
    positions: &[(i64, i64)],
    mask: &AttentionMask,
    weights: &BlockWeights<T>,
    cfg: &BlockConfig,
    cache: &BlockCache<T>,
) -> Result<(Vec<T>, BlockGrads<T>), AttentionError> {
    let d = cfg.attn.d_model;
    let n = positions.len();
    let dff = cfg.d_ff;

    // y = x1 + gelu(rmsnorm(x1) W1) W2
    let dy = upstream;
    let mut dw2 = vec![T::zero(); dff * d];
    matmul_tn_into(&cache.h_act, dy, n, dff, d, &mut dw2);
    let mut dh_act = vec![T::zero(); n * dff];
    matmul_nt_into(dy, &weights.w2, n, d, dff, &mut dh_act);
    let dh_pre: Vec<T> =
        dh_act.iter().zip(&cache.h_pre).map(|(&g, &h)| g * gelu_derivative(h)).collect();
    let mut dw1 = vec![T::zero(); d * dff];
    matmul_tn_into(&cache.b, &dh_pre, n, d, dff, &mut dw1);
    let mut db = vec![T::zero(); n * d];
    matmul_nt_into(&dh_pre, &weights.w1, n, dff, d, &mut db);
    let dx1_norm = rms_norm_backward(&db, &cache.b, &cache.rms2, d);
    let dx1: Vec<T> = dy.iter().zip(&dx1_norm).map(|(&a, &b)| a + b).collect();

    // x1 = x + attn_out Wo
    let mut dwo = vec![T::zero(); d * d];
    matmul_tn_into(&cache.attn_out, &dx1, n, d, d, &mut dwo);
    let mut dattn = vec![T::zero(); n * d];
    matmul_nt_into(&dx1, &weights.wo, n, d, d, &mut dattn);

    let io = AttentionIo { q: &cache.q, k: &cache.k, v: &cache.v, positions, mask };
    let (dq, dk, dv) = attention_backward(&io, &cfg.attn, &cache.attn, &dattn)?;

    let mut dwq = vec![T::zero(); d * d];
    let mut dwk = vec![T::zero(); d * d];
    let mut dwv = vec![T::zero(); d * d];
    matmul_tn_into(&cache.a, &dq, n, d, d, &mut dwq);
    matmul_tn_into(&cache.a, &dk, n, d, d, &mut dwk);
    matmul_tn_into(&cache.a, &dv, n, d, d, &mut dwv);

    let mut da = vec![T::zero(); n * d];
    let mut tmp = vec![T::zero(); n * d];
    matmul_nt_into(&dq, &weights.wq, n, d, d, &mut da);
    matmul_nt_into(&dk, &weights.wk, n, d, d, &mut tmp);
    for (o, &t) in da.iter_mut().zip(&tmp) {
        *o = *o + t;
    }
    matmul_nt_into(&dv, &weights.wv, n, d, d, &mut tmp);
    for (o, &t) in da.iter_mut().zip(&tmp) {
        *o = *o + t;
    }
    let dx_norm = rms_norm_backward(&da, &cache.a, &cache.rms1, d);
    let dx: Vec<T> = dx1.iter().zip(&dx_norm).map(|(&a, &b)| a + b).collect();

    Ok((dx, BlockGrads { wq: dwq, wk: dwk, wv: dwv, wo: dwo, w1: dw1, w2: dw2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::AttentionMask;

    fn cfg() -> BlockConfig {
        BlockConfig {
            attn: AttentionConfig::new(8, 2, 10_000.0).unwrap(),
            d_ff: 16,
            rms_eps: 1e-6,
        }
    }

    fn randn(n: usize, label: &str) -> Vec<f64> {
        let key = RngKey::new(12).substream(label);
        (0..n).map(|i| key.at(i as u64).normal()).collect()
    }

    #[test]
    fn zero_output_projections_make_identity() {
        let c = cfg();
        let w: BlockWeights<f64> = BlockWeights::init(&c, &RngKey::new(1), 0.1);
        let n = 5;
        let x = randn(n * 8, "x");
        let positions: Vec<(i64, i64)> = (0..n as i64).map(|i| (i, i)).collect();
        let mask = AttentionMask::all_allowed(n);
        let (y, _) = block_forward(&x, &positions, &mask, &w, &c).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn stacking_two_blocks_composes() {
        let c = cfg();
        let mut w: BlockWeights<f64> = BlockWeights::init(&c, &RngKey::new(2), 0.1);
        w.wo = randn(64, "wo").iter().map(|v| 0.1 * v).collect();
        w.w2 = randn(16 * 8, "w2").iter().map(|v| 0.1 * v).collect();
        let n = 4;
        let x = randn(n * 8, "x2");
        let positions: Vec<(i64, i64)> = (0..n as i64).map(|i| (i, 2 * i)).collect();
        let mask = AttentionMask::all_allowed(n);

        let (y1, _) = block_forward(&x, &positions, &mask, &w, &c).unwrap();
        let (y2, _) = block_forward(&y1, &positions, &mask, &w, &c).unwrap();

        let apply_twice = {
            let (a, _) = block_forward(&x, &positions, &mask, &w, &c).unwrap();
            let (b, _) = block_forward(&a, &positions, &mask, &w, &c).unwrap();
            b
        };
        assert_eq!(y2, apply_twice);
    }

    #[test]
    fn rms_norm_rows_normalizes() {
        let x = vec![3.0f64, 4.0, 0.0, 0.0, 5.0, 12.0, 0.0, 0.0];
        let (y, rms) = rms_norm_rows(&x, 4, 0.0);
        // mean(x^2) for row 0 = 25/4, rms = 2.5
        assert!((rms[0] - 2.5).abs() < 1e-12);
        assert!((y[0] - 1.2).abs() < 1e-12);
        assert!((rms[1] - 6.5).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // Reference values for the tanh approximation.
        assert!((gelu(0.0f64)).abs() < 1e-15);
        assert!((gelu(1.0f64) - 0.8411919906082768).abs() < 1e-12);
        assert!((gelu(-1.0f64) + 0.15880800939172324).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_derivative(x) - fd).abs() < 1e-8, "at {x}");
        }
    }
}
