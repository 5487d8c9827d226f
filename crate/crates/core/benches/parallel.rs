//! Sequential versus data-parallel batch gradients on a synthetic batch.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lgqave_core::model::{ModelDims, ModelParams, Pipeline, PreparedEpisode};
use lgqave_core::synthbench::{calibrated_beta, generate_episode, SynthConfig};
use lgqave_core::training::{batch_gradients, prepare_all, CategoryBank, StepInputs};
use lgqave_core::Exec;

fn batch_gradient_modes(c: &mut Criterion) {
    lgqave_core::exec::init_thread_pool();
    let cfg = SynthConfig::default();
    let beta = calibrated_beta(&cfg, 64).expect("calibration");
    let eps: Vec<_> = (0..32).map(|i| generate_episode(&cfg, i)).collect();
    let mut params = ModelParams::init(ModelDims::new(cfg.width, cfg.width, 64), 1, beta, 0.9).expect("model");
    params.randomize_heads(2);
    let pipeline = Pipeline::default();
    let prepared = prepare_all(&eps, &params, &pipeline, Exec::Parallel).expect("prepare");

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for size in [8usize, 32] {
        let batch: Vec<&PreparedEpisode> = prepared.iter().take(size).collect();
        let bank = CategoryBank::from_episodes(batch.iter().copied());
        let inputs = StepInputs::unmasked(&batch, &bank);
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, size), &batch, |b, batch| {
                b.iter(|| {
                    black_box(batch_gradients::<f32>(&params, batch, 1.0, &pipeline, &inputs, exec).expect("gradients"))
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_gradient_modes);
criterion_main!(benches);
