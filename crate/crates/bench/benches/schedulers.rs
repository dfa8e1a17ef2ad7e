use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use uio_core::data::token_samples;
use uio_core::{
    run_bptt, run_incremental_tbptt, run_tbptt, run_unbiased_incremental_tbptt, SegmentModel,
    ToyRnn, ToyTransformer, TransformerConfig,
};

fn rnn_schedulers(c: &mut Criterion) {
    let model = ToyRnn::default();
    let segments = model.random_segments(32, 7);
    let params = model.init_params(7);
    let mut group = c.benchmark_group("rnn_chain_32");
    group.bench_function("bptt", |b| {
        b.iter(|| run_bptt(&model, &segments, &params).unwrap())
    });
    for window in [1usize, 4, 8] {
        group.bench_with_input(BenchmarkId::new("tbptt", window), &window, |b, &s| {
            b.iter(|| run_tbptt(&model, &segments, s, &params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("incremental", window), &window, |b, &s| {
            b.iter(|| run_incremental_tbptt(&model, &segments, s, &params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("unbiased", window), &window, |b, &s| {
            b.iter(|| {
                run_unbiased_incremental_tbptt(&model, &segments, s, &params, 7, true, None)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn transformer_step(c: &mut Criterion) {
    let cfg = TransformerConfig::default();
    let model = ToyTransformer::new(cfg);
    let params = model.init_params(7);
    let segments = token_samples(8, cfg.seg_len, cfg.vocab, 7);
    let mut group = c.benchmark_group("transformer_chain_8");
    group.sample_size(20);
    for window in [1usize, 4] {
        group.bench_with_input(BenchmarkId::new("tbptt", window), &window, |b, &s| {
            b.iter(|| run_tbptt(&model, &segments, s, &params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("incremental", window), &window, |b, &s| {
            b.iter(|| run_incremental_tbptt(&model, &segments, s, &params).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, rnn_schedulers, transformer_step);
criterion_main!(benches);
