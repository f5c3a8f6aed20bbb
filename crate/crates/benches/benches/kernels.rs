use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tokenhier_benches::{random_mat, tissue_raster};
use tokenhier_core::color::{rgb_to_lab, stain_augment, StainAugConfig};
use tokenhier_core::numkernel::{matmul, matmul_nt, RngStream};
use tokenhier_core::tiler::{extract_tiles, gray_histogram, otsu_threshold, TileOptions};

fn matmul_sizes(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let a = random_mat(n, n, 1);
        let b = random_mat(n, n, 2);
        g.bench_with_input(BenchmarkId::new("nn", n), &n, |bch, _| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
        g.bench_with_input(BenchmarkId::new("nt", n), &n, |bch, _| bch.iter(|| matmul_nt(black_box(&a), black_box(&b)).unwrap()));
    }
    g.finish();
}

fn colour(c: &mut Criterion) {
    let r = tissue_raster(256);
    c.bench_function("rgb_to_lab 256px", |b| b.iter(|| rgb_to_lab(black_box(&r))));
    let cfg = StainAugConfig::default();
    c.bench_function("stain_augment 256px", |b| {
        b.iter(|| stain_augment(black_box(&r), &cfg, &mut RngStream::new(0, 0)).unwrap())
    });
}

fn tiling(c: &mut Criterion) {
    let r = tissue_raster(1024);
    c.bench_function("otsu 1024px", |b| b.iter(|| otsu_threshold(&gray_histogram(black_box(&r))).unwrap()));
    c.bench_function("extract_tiles 1024px", |b| {
        b.iter(|| extract_tiles(black_box(&r), "bench", &TileOptions::default()).unwrap())
    });
}

criterion_group!(benches, matmul_sizes, colour, tiling);
criterion_main!(benches);
