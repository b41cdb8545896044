use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use forge_bench::{mock_product, noise_raster};
use forge_core::clean::{missing_fraction, score_candidate, CleanerConfig, MissingRule};
use forge_core::convert::{normalize_minmax, normalize_std, render_u8, stats_of, NormalizationMode, StatsScope};
use forge_core::patches::{extract_patches, PatchGrid};
use forge_core::raster::{decode_geotiff, encode_geotiff};
use forge_core::sampler::{generate_points, SamplerConfig, WaterMask};
use forge_core::Satellite;

fn normalization(c: &mut Criterion) {
    let mut g = c.benchmark_group("normalize");
    for size in [250usize, 1000] {
        let r = noise_raster(size, 1);
        let stats = stats_of(&r, &["B4"]).unwrap();
        g.throughput(Throughput::Elements((size * size) as u64));
        g.bench_with_input(BenchmarkId::new("stats", size), &r, |b, r| b.iter(|| stats_of(black_box(r), &["B4"])));
        g.bench_with_input(BenchmarkId::new("minmax", size), &r, |b, r| b.iter(|| normalize_minmax(black_box(r), &stats)));
        g.bench_with_input(BenchmarkId::new("std", size), &r, |b, r| b.iter(|| normalize_std(black_box(r), &stats)));
    }
    let product = mock_product(Satellite::S2, 1000);
    g.throughput(Throughput::Elements(1_000_000));
    g.bench_function("render_s2_rgb/1000", |b| {
        b.iter(|| render_u8(black_box(&product), Satellite::S2, NormalizationMode::MinMax, StatsScope::Band))
    });
    g.finish();
}

fn cleaning(c: &mut Criterion) {
    let product = mock_product(Satellite::S2, 1000);
    let cfg = CleanerConfig::default();
    let rule = MissingRule::for_satellite(Satellite::S2, &cfg);
    let mut g = c.benchmark_group("clean");
    g.throughput(Throughput::Elements(1_000_000));
    g.bench_function("missing_fraction/1000", |b| b.iter(|| missing_fraction(black_box(&product), &rule)));
    g.bench_function("score_candidate/1000", |b| b.iter(|| score_candidate(black_box(&product), Satellite::S2, &cfg)));
    g.finish();
}

fn patches(c: &mut Criterion) {
    let product = mock_product(Satellite::S2, 1000);
    let img = render_u8(&product, Satellite::S2, NormalizationMode::MinMax, StatsScope::Band).unwrap();
    let mut g = c.benchmark_group("patches");
    for patch in [250usize, 100] {
        let grid = PatchGrid::new(1000, 1000, patch, patch).unwrap();
        g.bench_with_input(BenchmarkId::new("extract", patch), &grid, |b, grid| b.iter(|| extract_patches(black_box(&img), grid)));
    }
    g.finish();
}

fn geotiff(c: &mut Criterion) {
    let product = mock_product(Satellite::S2, 1000);
    let bytes = encode_geotiff(&product).unwrap();
    let mut g = c.benchmark_group("geotiff");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("encode/1000x4", |b| b.iter(|| encode_geotiff(black_box(&product))));
    g.bench_function("decode/1000x4", |b| b.iter(|| decode_geotiff(black_box(&bytes))));
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let mask = WaterMask::builtin();
    let cfg = SamplerConfig { n_points: 10_000, seed: 3, ..Default::default() };
    let mut g = c.benchmark_group("sampler");
    g.throughput(Throughput::Elements(cfg.n_points as u64));
    g.bench_function("generate_points/10000", |b| b.iter(|| generate_points(black_box(&cfg), &mask)));
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = normalization, cleaning, patches, geotiff, sampling
}
criterion_main!(benches);
