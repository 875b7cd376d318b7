//! Microbenchmarks for the hot paths: rotary application, a full model
//! forward pass, and stochastic sampler steps.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use flowlab_core::config::{RunConfig, TaskKind};
use flowlab_core::net::{Model, NetInput};
use flowlab_core::positional::{apply_rotary, image_position_ids, RopeConfig};
use flowlab_core::rng::derive_rng;
use flowlab_core::sampler::{sample_trajectory, sde_step, NoiseSchedule};
use flowlab_core::tensor::Tensor;
use rand::Rng as _;

fn bench_rotary(c: &mut Criterion) {
    let cfg = RopeConfig::with_frames(16);
    let mut rng = derive_rng(100, 0);
    let ids = image_position_ids(0, 8, 8).unwrap();
    let vectors: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    c.bench_function("rotary_64_tokens", |b| {
        b.iter(|| apply_rotary(&vectors, &ids, &cfg).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let run = RunConfig::default_for(TaskKind::Glyph);
    let mut rng = derive_rng(101, 0);
    let model = Model::init(run.model.clone(), &mut rng).unwrap();
    let grid = run.grid();
    let x = Tensor::standard_normal(run.latent_shape(), &mut rng);
    let prompt = vec![3usize];
    c.bench_function("model_forward_glyph", |b| {
        b.iter(|| {
            model
                .forward(&NetInput::new(&prompt, &x, grid, 0.5))
                .unwrap()
        })
    });
}

fn bench_sampler(c: &mut Criterion) {
    let mut rng = derive_rng(102, 0);
    let x = Tensor::standard_normal(vec![16, 16], &mut rng);
    let v = Tensor::standard_normal(vec![16, 16], &mut rng);
    let noise = Tensor::standard_normal(vec![16, 16], &mut rng);
    c.bench_function("sde_step_16x16", |b| {
        b.iter(|| sde_step(&x, &v, 0.4, 0.02, 0.3, &noise).unwrap())
    });

    let schedule = NoiseSchedule { steps: 20, eps: 1e-3, sigma: 0.3 };
    c.bench_function("sde_trajectory_20_steps", |b| {
        b.iter_batched(
            || derive_rng(103, 0),
            |mut rng| {
                sample_trajectory(
                    |x, _t| Ok(x.map(|v| -v)),
                    &[16, 16],
                    &schedule,
                    &mut rng,
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_rotary, bench_forward, bench_sampler);
criterion_main!(benches);
