//! Parallel-vs-sequential comparison for the data-parallel inner loops.
//!
//! The `*_seq` entry points are always sequential; the plain ones use rayon
//! when the default `parallel` feature is on. The pipeline benchmark also
//! runs the parallel build inside a single-threaded pool to expose the
//! scheduling overhead alone.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use dav_core::config::{CountingMode, PipelineConfig};
use dav_core::detect::{detect_stage, DetectWeights};
use dav_core::nn::{conv2d, conv2d_seq, Conv2d, Padding, Volume};
use dav_core::rng::SplitMix64;
use dav_core::synth::{gen_scene, ClassSpec, SceneSpec};
use dav_core::tensor::{bilinear_resample, Tensor};
use dav_core::verify::{verify_stage, VerifierWeights};

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3_d8");
    let mut rng = SplitMix64::new(1);
    for size in [64usize, 192] {
        let input = Volume::from_fn(size, size, 8, |_, _, _| rng.range_f64(-1.0, 1.0));
        let conv = Conv2d::glorot(3, 3, 8, 8, &mut rng);
        group.bench_with_input(BenchmarkId::new("parallel", size), &size, |b, _| {
            b.iter(|| black_box(conv2d(&input, &conv, Padding::Zeros).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("sequential", size), &size, |b, _| {
            b.iter(|| black_box(conv2d_seq(&input, &conv, Padding::Zeros).unwrap()))
        });
    }
    group.finish();
}

fn bench_resample(c: &mut Criterion) {
    let mut group = c.benchmark_group("bilinear_resample_4x");
    let t = Tensor::from_fn(64, 64, 8, |y, x, ch| ((y * 31 + x * 7 + ch) % 13) as f32);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(bilinear_resample(&t, 256, 256).unwrap()))
    });
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function("one_thread", |b| {
            b.iter(|| pool.install(|| black_box(bilinear_resample(&t, 256, 256).unwrap())))
        });
    }
    group.finish();
}

fn scene_fixture() -> dav_core::Scene {
    gen_scene(&SceneSpec {
        dims: (128, 128),
        classes: vec![
            ClassSpec { count: 12, size_range: (8, 12) },
            ClassSpec { count: 12, size_range: (8, 12) },
        ],
        leakage: 1.0,
        seed: 42,
        ..Default::default()
    })
    .unwrap()
}

fn bench_pipeline_stages(c: &mut Criterion) {
    let scene = scene_fixture();
    let dw = DetectWeights::init(8, 8, 7);
    let vw = VerifierWeights::init(8, 8);
    let cfg = PipelineConfig::default();

    let mut group = c.benchmark_group("detect_and_verify");
    group.sample_size(20);
    group.bench_function("detect_stage", |b| {
        b.iter(|| black_box(detect_stage(&scene, &dw, &cfg).unwrap()))
    });
    let det = detect_stage(&scene, &dw, &cfg).unwrap();
    group.bench_function("verify_stage", |b| {
        b.iter(|| {
            black_box(
                verify_stage(&det.candidates, &scene, &vw, &cfg, CountingMode::Fewshot).unwrap(),
            )
        })
    });
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function("detect_stage_one_thread", |b| {
            b.iter(|| pool.install(|| black_box(detect_stage(&scene, &dw, &cfg).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_resample, bench_pipeline_stages);
criterion_main!(benches);
