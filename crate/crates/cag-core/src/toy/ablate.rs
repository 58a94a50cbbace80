//! Dropout-probability sweep: train one model per (p, seed), evaluate
//! reconstruction with and without reference VAE features, and emit a
//! schema-versioned JSON report plus a plot-ready CSV.

use serde::{Deserialize, Serialize};

use crate::parallel::map_indexed;

use super::dataset::ToyDataset;
use super::train::{train_toy, TrainConfig};
use super::HarnessError;

pub const ABLATE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    WithVae,
    WithoutVae,
}

/// One trained (p, seed) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub p_vae: f64,
    pub seed: u64,
    pub recon_with_vae: f64,
    pub recon_without_vae: f64,
    pub attn_mass_in_bbox: Option<f64>,
    pub final_loss: f64,
    pub wall_clock_secs: f64,
}

/// Per-p aggregation over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateSummary {
    pub p_vae: f64,
    pub n_seeds: usize,
    pub median_with_vae: f64,
    pub median_without_vae: f64,
    pub mean_with_vae: f64,
    pub mean_without_vae: f64,
    pub variance_with_vae: f64,
    pub variance_without_vae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateReport {
    pub schema_version: u32,
    pub eval_mode: EvalMode,
    pub p_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblateRow>,
    pub summary: Vec<AblateSummary>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Trains one model per (p, seed) pair from `base` and aggregates the two
/// evaluation settings per p.
pub fn ablate_dropout(
    dataset: &ToyDataset,
    base: TrainConfig,
    p_list: &[f64],
    seeds: &[u64],
    eval_mode: EvalMode,
) -> Result<AblateReport, HarnessError> {
    if p_list.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Invalid("p_list and seeds must be non-empty".into()));
    }
    if p_list.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(HarnessError::Invalid("p_list entries must lie in [0, 1]".into()));
    }

    let cells: Vec<(f64, u64)> = p_list
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();

    let rows: Vec<Result<AblateRow, HarnessError>> =
        map_indexed(base.exec, cells.len(), |i| {
            let (p, seed) = cells[i];
            let mut cfg = base;
            cfg.dropout.p_vae = p;
            cfg.seed = seed;
            let outcome = train_toy(dataset, cfg, None)?;
            let run = outcome.run;
            Ok(AblateRow {
                p_vae: p,
                seed,
                recon_with_vae: run.eval_with_vae.recon_error,
                recon_without_vae: run.eval_without_vae.recon_error,
                attn_mass_in_bbox: run.eval_with_vae.attn_mass_in_bbox,
                final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
                wall_clock_secs: run.wall_clock_secs,
            })
        });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;

    let summary = p_list
        .iter()
        .map(|&p| {
            let with: Vec<f64> = rows
                .iter()
                .filter(|r| r.p_vae == p)
                .map(|r| r.recon_with_vae)
                .collect();
            let without: Vec<f64> = rows
                .iter()
                .filter(|r| r.p_vae == p)
                .map(|r| r.recon_without_vae)
                .collect();
            let (mean_with, var_with) = mean_var(&with);
            let (mean_without, var_without) = mean_var(&without);
            AblateSummary {
                p_vae: p,
                n_seeds: with.len(),
                median_with_vae: median(&mut with.clone()),
                median_without_vae: median(&mut without.clone()),
                mean_with_vae: mean_with,
                mean_without_vae: mean_without,
                variance_with_vae: var_with,
                variance_without_vae: var_without,
            }
        })
        .collect();

    Ok(AblateReport {
        schema_version: ABLATE_SCHEMA_VERSION,
        eval_mode,
        p_list: p_list.to_vec(),
        seeds: seeds.to_vec(),
        rows,
        summary,
    })
}

impl AblateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plot-ready CSV, one row per (p, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "p_vae,seed,recon_with_vae,recon_without_vae,attn_mass_in_bbox,final_loss,wall_clock_secs\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.p_vae,
                r.seed,
                r.recon_with_vae,
                r.recon_without_vae,
                r.attn_mass_in_bbox.map(|m| m.to_string()).unwrap_or_default(),
                r.final_loss,
                r.wall_clock_secs
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::dataset::{generate_dataset, ToyParams};
    use crate::toy::model::ModelConfig;
    use crate::toy::train::MaskMode;

    #[test]
    fn report_has_per_seed_variance_fields() {
        let ds = generate_dataset(&ToyParams { n_scenes: 6, grid: 4, ..Default::default() })
            .unwrap();
        let base = TrainConfig {
            model: ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                d_ff: 32,
                vocab_size: ds.vocab.len(),
                feature_dim: ds.params.feature_dim,
                ..Default::default()
            },
            steps: 2,
            batch_size: 2,
            n_eval_scenes: 2,
            sampler_steps: 2,
            mask_mode: MaskMode::Masked,
            ..Default::default()
        };
        let report = ablate_dropout(&ds, base, &[0.5], &[1, 2], EvalMode::WithoutVae).unwrap();
        assert_eq!(report.schema_version, 1);
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.summary.len(), 1);
        assert_eq!(report.summary[0].n_seeds, 2);
        assert!(report.summary[0].variance_without_vae.is_finite());
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("p_vae,seed,"));
    }

    #[test]
    fn invalid_p_rejected() {
        let ds = generate_dataset(&ToyParams { n_scenes: 4, grid: 4, ..Default::default() })
            .unwrap();
        let base = TrainConfig::default();
        assert!(ablate_dropout(&ds, base, &[1.5], &[1], EvalMode::WithVae).is_err());
    }
}
