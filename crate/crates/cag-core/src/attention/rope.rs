//! 2D rotary position embedding.
//!
//! Per head, the first half of the head dimension rotates by row-derived
//! angles and the second half by column-derived angles; within each half,
//! adjacent pairs rotate at geometrically decaying frequencies. The map is
//! orthogonal per token, so norms are preserved and q-k dot products depend
//! only on relative position.

use crate::numerics::FloatElem;

use super::{AttentionConfig, AttentionError};

fn check_input<T>(
    x: &[T],
    positions: &[(i64, i64)],
    cfg: &AttentionConfig,
) -> Result<usize, AttentionError> {
    cfg.validate()?;
    let n = positions.len();
    if x.len() != n * cfg.d_model {
        return Err(AttentionError::ShapeMismatch {
            what: "rope input length",
            expected: n * cfg.d_model,
            got: x.len(),
        });
    }
    Ok(n)
}

fn rotate<T: FloatElem>(x: &[T], positions: &[(i64, i64)], cfg: &AttentionConfig, sign: f64) -> Vec<T> {
    let d = cfg.d_model;
    let h = cfg.head_dim();
    let axis = h / 2;
    let pairs = axis / 2;
    // Frequencies are shared by both axes.
    let freqs: Vec<f64> =
        (0..pairs).map(|i| cfg.rope_base.powf(-((2 * i) as f64) / axis as f64)).collect();

    let mut out = vec![T::zero(); x.len()];
    for (t, &(row, col)) in positions.iter().enumerate() {
        for head in 0..cfg.n_heads {
            let base = t * d + head * h;
            for (half, pos) in [(0usize, row as f64), (axis, col as f64)] {
                for (i, &freq) in freqs.iter().enumerate() {
                    let angle = sign * pos * freq;
                    let (sin, cos) = (T::from_f64(angle.sin()), T::from_f64(angle.cos()));
                    let idx = base + half + 2 * i;
                    let (a, b) = (x[idx], x[idx + 1]);
                    out[idx] = a * cos - b * sin;
                    out[idx + 1] = a * sin + b * cos;
                }
            }
        }
    }
    out
}

/// Rotates `x` (row-major `n x d_model`) by its token positions.
pub fn apply_rope2d<T: FloatElem>(
    x: &[T],
    positions: &[(i64, i64)],
    cfg: &AttentionConfig,
) -> Result<Vec<T>, AttentionError> {
    check_input(x, positions, cfg)?;
    Ok(rotate(x, positions, cfg, 1.0))
}

/// Transpose (= inverse) of [`apply_rope2d`]; the backward map for rotary
/// gradients.
pub fn apply_rope2d_transpose<T: FloatElem>(
    x: &[T],
    positions: &[(i64, i64)],
    cfg: &AttentionConfig,
) -> Result<Vec<T>, AttentionError> {
    check_input(x, positions, cfg)?;
    Ok(rotate(x, positions, cfg, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngKey;

    fn cfg() -> AttentionConfig {
        AttentionConfig::new(16, 2, 10_000.0).unwrap()
    }

    fn random_rows(n: usize, d: usize, label: &str) -> Vec<f64> {
        let key = RngKey::new(42).substream(label);
        (0..n * d).map(|i| key.at(i as u64).normal()).collect()
    }

    #[test]
    fn zero_position_is_identity() {
        let x = random_rows(1, 16, "rope-id");
        let y = apply_rope2d(&x, &[(0, 0)], &cfg()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rotation_preserves_norm() {
        let x = random_rows(3, 16, "rope-norm");
        let y = apply_rope2d(&x, &[(3, 9), (-2, 7), (100, 41)], &cfg()).unwrap();
        for t in 0..3 {
            let nx: f64 = x[t * 16..(t + 1) * 16].iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y[t * 16..(t + 1) * 16].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - ny).abs() < 1e-6, "token {t}: {nx} vs {ny}");
        }
    }

    #[test]
    fn dot_products_depend_only_on_relative_position() {
        let c = cfg();
        let q = random_rows(1, 16, "rope-rel-q");
        let k = random_rows(1, 16, "rope-rel-k");
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

        let q1 = apply_rope2d(&q, &[(2, 11)], &c).unwrap();
        let k1 = apply_rope2d(&k, &[(6, 4)], &c).unwrap();
        // Translate both positions by (5, 7).
        let q2 = apply_rope2d(&q, &[(7, 18)], &c).unwrap();
        let k2 = apply_rope2d(&k, &[(11, 11)], &c).unwrap();
        assert!((dot(&q1, &k1) - dot(&q2, &k2)).abs() < 1e-12);
    }

    #[test]
    fn transpose_inverts() {
        let c = cfg();
        let x = random_rows(2, 16, "rope-inv");
        let pos = [(4, -3), (9, 2)];
        let y = apply_rope2d(&x, &pos, &c).unwrap();
        let back = apply_rope2d_transpose(&y, &pos, &c).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_dim_must_split_into_two_axes() {
        // head_dim 6 is not divisible by 4.
        assert!(AttentionConfig::new(12, 2, 10_000.0).is_err());
    }
}
