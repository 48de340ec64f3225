//! Parallel vs sequential schedules for the hot kernels. Every benchmark runs
//! twice: once on the default rayon pool and once inside `par::sequential`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use warpgen::autodiff::Graph;
use warpgen::data::{Dataset, SceneDistribution};
use warpgen::field::warp_batch;
use warpgen::models::{GeneratorBundle, InitMode, Latents, ModelConfig};
use warpgen::par;
use warpgen::rng::KeyedRng;
use warpgen::train::{Ablation, FinetuneStart, Stage, TrainConfig, Trainer};
use warpgen::Tensor;

fn normal(tag: &str, shape: [usize; 4], scale: f64) -> Tensor {
    let v = KeyedRng::new(7).normals(tag, 0, shape.iter().product());
    Tensor::from_vec(shape, v.into_iter().map(|x| x * scale).collect()).unwrap()
}

/// Runs `body` under both schedules as two entries of one group.
fn both(c: &mut Criterion, group: &str, samples: usize, mut body: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(samples);
    g.bench_function(BenchmarkId::new("parallel", ""), |b| b.iter(&mut body));
    g.bench_function(BenchmarkId::new("sequential", ""), |b| {
        par::sequential(|| b.iter(&mut body))
    });
    g.finish();
}

fn warp(c: &mut Criterion) {
    let img = normal("img", [16, 3, 32, 32], 0.5);
    let fld = normal("fld", [16, 2, 32, 32], 2.0);
    both(c, "warp_batch_16x32", 50, || {
        black_box(warp_batch(&img, &fld).unwrap());
    });
}

fn conv(c: &mut Criterion) {
    let x = normal("x", [8, 32, 32, 32], 1.0);
    let w = normal("w", [32, 32, 3, 3], 0.1);
    both(c, "conv3x3_fwd_bwd", 20, || {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.leaf(w.clone());
        let y = g.conv2d(xv, wv).unwrap();
        let l = g.mean(y);
        black_box(g.backward(l).unwrap());
    });
}

fn sample(c: &mut Criterion) {
    let cfg = ModelConfig {
        init_mode: InitMode::NoMultiplier,
        ..ModelConfig::desk()
    };
    let bundle = GeneratorBundle::init(cfg.clone()).unwrap();
    let lat = Latents::from_seed(&cfg, 1);
    both(c, "sample_16_frames", 10, || {
        black_box(bundle.sample(&lat, 16).unwrap());
    });
}

fn finetune_step(c: &mut Criterion) {
    let ds = Dataset::generate(8, &SceneDistribution::default(), 1).unwrap();
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        batch_size: 4,
        ablation: Ablation {
            no_pretrain: true,
            ..Ablation::default()
        },
        ..TrainConfig::default()
    };
    let mut t = Trainer::finetune(FinetuneStart::Scratch(ModelConfig::desk()), cfg).unwrap();
    both(c, "finetune_step_desk", 10, || {
        black_box(t.step(&ds).unwrap());
    });
}

criterion_group!(benches, warp, conv, sample, finetune_step);
criterion_main!(benches);
