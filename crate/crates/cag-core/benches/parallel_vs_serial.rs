//! Parallel vs sequential comparison for the data-parallel hot paths:
//! batch gradient accumulation, per-scene evaluation, and mask compilation
//! sweeps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cag_core::numerics::RngKey;
use cag_core::parallel::{map_indexed, Exec};
use cag_core::toy::{
    batch_gradients, evaluate, generate_dataset, prepare_training, scene_layout, scene_mask,
    EvalOptions, MaskMode, ModelConfig, ToyModel, ToyParams, TrainConfig,
};

fn bench_setup() -> (cag_core::toy::ToyDataset, TrainConfig) {
    let dataset = generate_dataset(&ToyParams { n_scenes: 32, ..Default::default() }).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            vocab_size: dataset.vocab.len(),
            feature_dim: dataset.params.feature_dim,
            ..Default::default()
        },
        batch_size: 8,
        n_eval_scenes: 8,
        sampler_steps: 4,
        ..Default::default()
    };
    (dataset, cfg)
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (dataset, cfg) = bench_setup();
    let setup = prepare_training(&dataset, cfg).unwrap();
    let model: ToyModel<f32> =
        ToyModel::init(cfg.model, &RngKey::new(cfg.seed).substream("init"));

    let mut group = c.benchmark_group("batch_gradients");
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Auto)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let (loss, grads) =
                    batch_gradients(&model, &dataset, &setup, black_box(0), exec).unwrap();
                black_box((loss, grads));
            })
        });
    }
    group.finish();
}

fn bench_eval_sweep(c: &mut Criterion) {
    let (dataset, cfg) = bench_setup();
    let model: ToyModel<f32> =
        ToyModel::init(cfg.model, &RngKey::new(cfg.seed).substream("init"));
    let (_, eval_scenes) = dataset.split(cfg.n_eval_scenes);

    let mut group = c.benchmark_group("eval_scenes");
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Auto)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let opts = EvalOptions {
                    with_vae: true,
                    sampler_steps: 4,
                    guidance_scale: 1.0,
                    seed: 0,
                    compute_attn_mass: false,
                    exec,
                };
                let metrics =
                    evaluate(&model, &dataset, eval_scenes, MaskMode::Masked, &opts).unwrap();
                black_box(metrics);
            })
        });
    }
    group.finish();
}

fn bench_mask_compile_sweep(c: &mut Criterion) {
    let (dataset, _) = bench_setup();
    let layout = scene_layout(&dataset, true).unwrap();

    let mut group = c.benchmark_group("mask_compile_sweep");
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Auto)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let masks = map_indexed(exec, dataset.scenes.len(), |i| {
                    scene_mask(&dataset, &dataset.scenes[i], &layout, MaskMode::Masked, false)
                        .unwrap()
                });
                black_box(masks);
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_eval_sweep, bench_mask_compile_sweep);
criterion_main!(benches);
