//! Runnable numeric self-checks for the attention kernels, used by the
//! `attend check-equiv` and `attend check-grad` commands.

use std::collections::BTreeMap;

use crate::mask::{AttentionMask, TokenSet};
use crate::numerics::RngKey;
use crate::parallel::{map_indexed, Exec};

use super::core::{attention_backward, masked_attention, masked_attention_cached};
use super::{AttentionConfig, AttentionError, AttentionIo};

/// Result of a gather-equivalence sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EquivReport {
    pub instances: usize,
    pub n_tokens: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Result of a finite-difference gradient sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradReport {
    pub instances: usize,
    pub n_tokens: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub masked_grads_exactly_zero: bool,
    pub pass: bool,
}

fn randn(key: &RngKey, len: usize) -> Vec<f64> {
    (0..len).map(|i| key.at(i as u64).normal()).collect()
}

fn random_positions(key: &RngKey, n: usize) -> Vec<(i64, i64)> {
    (0..n)
        .map(|t| {
            let k = key.at(t as u64);
            (k.substream("r").index(64) as i64 - 8, k.substream("c").index(64) as i64 - 8)
        })
        .collect()
}

/// Random mask: full default row plus restricted override rows; every row
/// stays non-empty.
pub fn random_mask(key: &RngKey, n: usize) -> AttentionMask {
    let n_overrides = key.substream("count").index(n / 2 + 1);
    let mut overrides = BTreeMap::new();
    for i in 0..n_overrides {
        let k = key.substream_u64(i as u64);
        let q = k.substream("q").index(n);
        let a = k.substream("a").index(n);
        let b = k.substream("b").index(n);
        let (lo, hi) = if a <= b { (a, b + 1) } else { (b, a + 1) };
        let mut set = TokenSet::from_range(lo, hi);
        if k.substream("extra").uniform() < 0.5 {
            let c = k.substream("c").index(n);
            set = set.union(&TokenSet::from_range(c, c + 1));
        }
        overrides.insert(q, set);
    }
    AttentionMask::new(n, TokenSet::from_range(0, n), overrides).expect("bounds hold")
}

/// Compares masked attention against a gather-then-attend oracle that
/// computes each query row over only its allowed keys.
pub fn check_gather_equivalence(
    instances: usize,
    n_tokens: usize,
    seed: u64,
) -> Result<EquivReport, AttentionError> {
    let cfg = AttentionConfig::new(16, 2, 10_000.0)?;
    let d = cfg.d_model;
    let h = cfg.head_dim();
    let root = RngKey::new(seed).substream("equiv");

    let diffs: Vec<Result<f64, AttentionError>> = map_indexed(Exec::Auto, instances, |inst| {
        let key = root.substream_u64(inst as u64);
        let n = n_tokens;
        let q = randn(&key.substream("q"), n * d);
        let k = randn(&key.substream("k"), n * d);
        let v = randn(&key.substream("v"), n * d);
        let positions = random_positions(&key.substream("pos"), n);
        let mask = random_mask(&key.substream("mask"), n);

        let io = AttentionIo { q: &q, k: &k, v: &v, positions: &positions, mask: &mask };
        let full = masked_attention(&io, &cfg)?;

        let qr = super::rope::apply_rope2d(&q, &positions, &cfg)?;
        let kr = super::rope::apply_rope2d(&k, &positions, &cfg)?;

        let mut max_diff = 0.0f64;
        for row in 0..n {
            let allowed: Vec<usize> = mask.row(row).iter_indices().collect();
            for head in 0..cfg.n_heads {
                let qh = &qr[row * d + head * h..row * d + head * h + h];
                // Gathered scores over allowed keys only.
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| {
                        let kh = &kr[j * d + head * h..j * d + head * h + h];
                        qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() / (h as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for dim in 0..h {
                    let got: f64 = exps
                        .iter()
                        .zip(&allowed)
                        .map(|(e, &j)| e / z * v[j * d + head * h + dim])
                        .sum();
                    let diff = (got - full[row * d + head * h + dim]).abs();
                    max_diff = max_diff.max(diff);
                }
            }
        }
        Ok(max_diff)
    });

    let mut max_abs_diff = 0.0f64;
    for d in diffs {
        max_abs_diff = max_abs_diff.max(d?);
    }
    let tolerance = 1e-12;
    Ok(EquivReport {
        instances,
        n_tokens,
        max_abs_diff,
        tolerance,
        pass: max_abs_diff < tolerance,
    })
}

/// Checks the analytic backward pass against central finite differences
/// (h = 1e-5, f64) and verifies that a fully masked key receives exactly
/// zero gradient.
pub fn check_gradients(
    instances: usize,
    n_tokens: usize,
    seed: u64,
) -> Result<GradReport, AttentionError> {
    let cfg = AttentionConfig::new(8, 2, 10_000.0)?;
    let d = cfg.d_model;
    let root = RngKey::new(seed).substream("gradcheck");
    let h_step = 1e-5;

    let results: Vec<Result<(f64, bool), AttentionError>> =
        map_indexed(Exec::Auto, instances, |inst| {
            let key = root.substream_u64(inst as u64);
            let n = n_tokens;
            let q = randn(&key.substream("q"), n * d);
            let k = randn(&key.substream("k"), n * d);
            let v = randn(&key.substream("v"), n * d);
            let positions = random_positions(&key.substream("pos"), n);

            // Key n-1 is masked out of every row, so its k/v gradients must
            // vanish identically.
            let mut mask = random_mask(&key.substream("mask"), n);
            let blocked = TokenSet::from_range(n - 1, n);
            mask = AttentionMask::new(
                n,
                mask.default_row.subtract(&blocked),
                mask.overrides
                    .iter()
                    .map(|(&qi, set)| (qi, set.subtract(&blocked)))
                    .filter(|(_, set)| !set.is_empty())
                    .collect(),
            )
            .expect("bounds hold");
            mask.check_rows_non_empty()?;

            // Scalar loss: weighted sum of outputs.
            let w = randn(&key.substream("loss"), n * d);
            let loss = |q: &[f64], k: &[f64], v: &[f64]| -> Result<f64, AttentionError> {
                let io = AttentionIo { q, k, v, positions: &positions, mask: &mask };
                let out = masked_attention(&io, &cfg)?;
                Ok(out.iter().zip(&w).map(|(o, wi)| o * wi).sum())
            };

            let io = AttentionIo { q: &q, k: &k, v: &v, positions: &positions, mask: &mask };
            let (_, cache) = masked_attention_cached(&io, &cfg)?;
            let (dq, dk, dv) = attention_backward(&io, &cfg, &cache, &w)?;

            let masked_zero = dk[(n - 1) * d..].iter().all(|&g| g == 0.0)
                && dv[(n - 1) * d..].iter().all(|&g| g == 0.0);

            let mut max_rel = 0.0f64;
            let mut check = |analytic: &[f64],
                             base: &[f64],
                             which: usize|
             -> Result<(), AttentionError> {
                for i in 0..base.len() {
                    let mut plus = base.to_vec();
                    plus[i] += h_step;
                    let mut minus = base.to_vec();
                    minus[i] -= h_step;
                    let (lp, lm) = match which {
                        0 => (loss(&plus, &k, &v)?, loss(&minus, &k, &v)?),
                        1 => (loss(&q, &plus, &v)?, loss(&q, &minus, &v)?),
                        _ => (loss(&q, &k, &plus)?, loss(&q, &k, &minus)?),
                    };
                    let fd = (lp - lm) / (2.0 * h_step);
                    let a = analytic[i];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    max_rel = max_rel.max(rel);
                }
                Ok(())
            };
            check(&dq, &q, 0)?;
            check(&dk, &k, 1)?;
            check(&dv, &v, 2)?;
            Ok((max_rel, masked_zero))
        });

    let mut max_rel_err = 0.0f64;
    let mut masked_all_zero = true;
    for r in results {
        let (rel, zero) = r?;
        max_rel_err = max_rel_err.max(rel);
        masked_all_zero &= zero;
    }
    let tolerance = 1e-4;
    Ok(GradReport {
        instances,
        n_tokens,
        max_rel_err,
        tolerance,
        masked_grads_exactly_zero: masked_all_zero,
        pass: max_rel_err < tolerance && masked_all_zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_sweep_passes() {
        let report = check_gather_equivalence(20, 24, 7).unwrap();
        assert!(report.pass, "max diff {}", report.max_abs_diff);
    }

    #[test]
    fn gradient_sweep_passes() {
        let report = check_gradients(5, 8, 11).unwrap();
        assert!(report.pass, "max rel {}", report.max_rel_err);
        assert!(report.masked_grads_exactly_zero);
    }
}
