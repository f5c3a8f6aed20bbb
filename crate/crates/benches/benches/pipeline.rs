use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tokenhier_core::bench::pretraining_corpus;
use tokenhier_core::encoder::{forward, EncoderConfig, EncoderParams};
use tokenhier_core::numkernel::RngStream;
use tokenhier_core::ssl::{SslConfig, SslState};

fn encoder_forward(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let params = EncoderParams::init(&cfg, &mut RngStream::new(0, 0)).unwrap();
    let img = pretraining_corpus(0, 1, cfg.image_size, cfg.token_size).unwrap().remove(0);
    c.bench_function("encoder forward 64px", |b| b.iter(|| forward(black_box(&img), &params).unwrap()));
}

fn ssl_step(c: &mut Criterion) {
    let enc = EncoderConfig::default();
    let ssl = SslConfig::default();
    let corpus = pretraining_corpus(0, ssl.batch_size, enc.image_size, enc.token_size).unwrap();
    let state = SslState::new(&enc, &ssl, 0).unwrap();
    let mut g = c.benchmark_group("ssl");
    g.sample_size(10);
    g.bench_function("train_step batch 16", |b| {
        b.iter_batched(
            || state.clone(),
            |mut st| st.train_step(&corpus, &RngStream::new(0, 1)).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, encoder_forward, ssl_step);
criterion_main!(benches);
