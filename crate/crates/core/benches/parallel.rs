//! Sequential vs rayon execution for the data-parallel kernels.
//!
//! `cargo bench -p ffgo-core` compares both; with `--no-default-features`
//! only the sequential rows run.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ffgo_core::canvas::{self, CanvasSpec, ComposeJob, ElementLayer};
use ffgo_core::dataset::prefix_transition;
use ffgo_core::generation::{self, GenerationRequest};
use ffgo_core::lora::{self, GradInstance};
use ffgo_core::Exec;
use image::{Rgb, RgbImage, Rgba, RgbaImage};

fn strategies() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Exec::Parallel));
    v
}

fn element(w: u32, h: u32, seed: u32) -> ElementLayer {
    let img = RgbaImage::from_fn(w, h, |x, y| {
        let inside = (x as i64 - w as i64 / 2).pow(2) * (h as i64).pow(2) + (y as i64 - h as i64 / 2).pow(2) * (w as i64).pow(2)
            <= (w as i64 * h as i64 / 2).pow(2);
        Rgba([(x + seed) as u8, (y * 3) as u8, seed as u8, if inside { 255 } else { 0 }])
    });
    ElementLayer::new(format!("e{seed}"), img).unwrap()
}

fn background() -> RgbImage {
    RgbImage::from_fn(1280, 720, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
}

fn bench_compose(c: &mut Criterion) {
    let elements = vec![element(400, 300, 1), element(250, 500, 2), element(600, 200, 3)];
    let bg = background();
    let spec = CanvasSpec::default();
    let mut g = c.benchmark_group("compose");
    g.sample_size(20);
    for (name, exec) in strategies() {
        g.bench_with_input(BenchmarkId::new("single", name), &exec, |b, &exec| {
            b.iter(|| canvas::compose(black_box(&elements), &bg, &spec, exec).unwrap())
        });
    }
    let jobs: Vec<ComposeJob> = (0..8)
        .map(|i| ComposeJob {
            elements: (0..(i % 4 + 1)).map(|j| element(120 + 20 * j, 90 + 10 * i, i + j)).collect(),
            background: RgbImage::from_pixel(320, 180, Rgb([i as u8, 50, 60])),
        })
        .collect();
    for (name, exec) in strategies() {
        g.bench_with_input(BenchmarkId::new("batch_of_8", name), &exec, |b, &exec| {
            b.iter(|| canvas::compose_batch(black_box(&jobs), &spec, exec))
        });
    }
    g.finish();
}

fn bench_lora(c: &mut Criterion) {
    let ad = lora::random_adapter(256, 256, 32, 1.0, 1).unwrap();
    let w = lora::random_matrix(256, 256, 2);
    let mut g = c.benchmark_group("lora");
    g.sample_size(20);
    for (name, exec) in strategies() {
        g.bench_with_input(BenchmarkId::new("merge_256_r32", name), &exec, |b, &exec| {
            b.iter(|| lora::merge(black_box(&w), &ad, exec).unwrap())
        });
    }
    let draws: Vec<GradInstance> = (0..32).map(|i| GradInstance::draw(i, 12)).collect();
    for (name, exec) in strategies() {
        g.bench_with_input(BenchmarkId::new("grad_check_32", name), &exec, |b, &exec| {
            b.iter(|| exec.map(black_box(&draws), |d| d.run(1e-5, Exec::Sequential).unwrap()))
        });
    }
    g.finish();
}

fn bench_mock_generation(c: &mut Criterion) {
    let req = GenerationRequest {
        first_frame: RgbImage::from_pixel(320, 180, Rgb([10, 20, 30])),
        prompt: prefix_transition("A ball bounces.").unwrap(),
        frames_requested: 81,
        seed: 5,
    };
    let mut g = c.benchmark_group("mock_generation");
    g.sample_size(10);
    for (name, exec) in strategies() {
        g.bench_with_input(BenchmarkId::new("81_frames_320x180", name), &exec, |b, &exec| {
            b.iter(|| generation::mock_generate(black_box(&req), 4, exec))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_compose, bench_lora, bench_mock_generation);
criterion_main!(benches);
