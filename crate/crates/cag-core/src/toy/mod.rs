//! Toy referential-copy task and training harness: synthetic scenes with
//! exact groundings, a small masked-attention transformer trained with a
//! flow-matching objective, the dropout-probability sweep, and attention-map
//! export.

mod ablate;
mod dataset;
mod model;
mod train;
mod viz;

pub use ablate::{ablate_dropout, AblateReport, AblateRow, AblateSummary, EvalMode};
pub use dataset::{generate_dataset, BboxPolicy, Placement, ToyDataset, ToyParams, ToyScene};
pub use model::{ModelConfig, SceneInputs, ToyModel};
pub use train::{
    batch_gradients, evaluate, prepare_training, sample_scene, scene_attention_mass, scene_layout,
    scene_mask, train_toy, EvalMetrics, EvalOptions, MaskMode, MassReport, TrainConfig,
    TrainOutcome, TrainRun, TrainSetup,
};
pub use viz::{export_attention_maps, write_pgm, AttentionMapFiles};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Layout(#[from] crate::layout::LayoutError),
    #[error(transparent)]
    Mask(#[from] crate::mask::MaskError),
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("codec error: {0}")]
    Codec(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("loss became non-finite at step {step}{}", dump.as_ref().map(|p| format!(" (diagnostics at {})", p.display())).unwrap_or_default())]
    NanLoss { step: usize, dump: Option<PathBuf> },
    #[error("word {word:?} is not referential in this scene; valid words: {valid:?}")]
    NotReferential { word: String, valid: Vec<String> },
    #[error("scene index {0} out of range ({1} scenes)")]
    SceneOutOfRange(usize, usize),
    #[error("{0}")]
    Invalid(String),
}
