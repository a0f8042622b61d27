use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use tegu_bench::{desk_amateur, desk_models, random_tokens};
use tegu_core::decoding::{cd_decode, greedy_decode, tegu_decode, GuidanceConfig};
use tegu_core::model::KVCache;

/// 32-token prompt, 64 new tokens per call.
fn decoders(c: &mut Criterion) {
    let (backbone, projector) = desk_models();
    let amateur = desk_amateur();
    let prompt = random_tokens(32, 256, 9);
    let cfg = GuidanceConfig {
        max_new_tokens: 64,
        ..GuidanceConfig::default()
    };
    let two = GuidanceConfig {
        offsets: vec![1, 2],
        weights: vec![0.5, 0.5],
        ..cfg.clone()
    };
    let mut g = c.benchmark_group("decode_64_tokens");
    g.sample_size(10);
    g.bench_function("greedy", |b| {
        b.iter(|| greedy_decode(black_box(&prompt), &backbone, 64).unwrap())
    });
    g.bench_function("tegu/k=1", |b| {
        b.iter(|| tegu_decode(black_box(&prompt), &backbone, &projector, &cfg).unwrap())
    });
    g.bench_function("tegu/k=1,2", |b| {
        b.iter(|| tegu_decode(black_box(&prompt), &backbone, &projector, &two).unwrap())
    });
    g.bench_function("cd/2-layer-amateur", |b| {
        b.iter(|| cd_decode(black_box(&prompt), &backbone, &amateur, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, decoders, components);
criterion_main!(benches);

/// One decode step's worth of each component.
fn components(c: &mut Criterion) {
    let (backbone, projector) = desk_models();
    let prompt = random_tokens(32, 256, 9);
    let (hidden, _) = backbone.forward(&prompt).unwrap();
    let h = hidden.row(30).to_vec();
    let mut g = c.benchmark_group("step");
    g.bench_function("backbone_prefill_32", |b| {
        b.iter(|| {
            let mut cache = KVCache::new(&backbone);
            for &t in &prompt {
                black_box(backbone.step(t, &mut cache).unwrap());
            }
        })
    });
    g.bench_function("amateur_logprobs_at", |b| {
        b.iter(|| projector.amateur_logprobs_at(black_box(&h), 1, &backbone).unwrap())
    });
    g.finish();
}
