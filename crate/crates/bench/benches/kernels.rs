use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use tegu_bench::{desk_models, random_tokens, random_vec};
use tegu_core::decoding::{apc_mask, guided_scores};
use tegu_core::numerics::ops::matmul;
use tegu_core::numerics::{weighted_logsumexp, DenseArray, LogProbVector};
use tegu_core::training::{backbone_loss, total_loss, Batch, TrainingConfig};

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [128usize, 256, 512] {
        let a = DenseArray::from_vec(&[n, n], random_vec(n * n, 1)).unwrap();
        let b = DenseArray::from_vec(&[n, n], random_vec(n * n, 2)).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn guidance_math(c: &mut Criterion) {
    let v = 256;
    let exp = LogProbVector::from_logits(&random_vec(v, 3)).unwrap();
    let amt: Vec<LogProbVector> = (0..3)
        .map(|s| LogProbVector::from_logits(&random_vec(v, 10 + s)).unwrap())
        .collect();
    let logw = vec![(1.0f64 / 3.0).ln(); 3];
    c.bench_function("weighted_logsumexp/3x256", |b| {
        b.iter(|| weighted_logsumexp(black_box(&amt), black_box(&logw)).unwrap())
    });
    c.bench_function("guided_scores+apc/256", |b| {
        b.iter(|| {
            let s = guided_scores(exp.values(), amt[0].values(), 0.2).unwrap();
            apc_mask(&s, exp.values(), 0.1).unwrap()
        })
    });
}

fn training_steps(c: &mut Criterion) {
    let (backbone, projector) = desk_models();
    let tokens = random_tokens(4 * 256, 256, 5);
    let batch = Batch::new(tokens, 4, 256).unwrap();
    let cfg = TrainingConfig {
        offsets: vec![1, 2],
        ..TrainingConfig::default()
    };
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("backbone_loss/4x256", |b| {
        b.iter(|| backbone_loss(black_box(&batch), &backbone).unwrap())
    });
    g.bench_function("projector_total_loss/4x256/k=1,2", |b| {
        b.iter(|| total_loss(black_box(&batch), &backbone, &projector, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, gemm, guidance_math, training_steps);
criterion_main!(benches);
