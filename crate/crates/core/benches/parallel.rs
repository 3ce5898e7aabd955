//! Sequential vs parallel execution of the data-parallel hot paths.
//!
//! Build with `--no-default-features` to see the fallback: both arms then
//! run sequentially.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array2, Array3};
use rand::Rng;

use anomap::anchor_bank::{greedy_k_center, AnchorBank};
use anomap::backbone::{build_backbone, extract_batch, FeatureExtractor, Space};
use anomap::config::RunConfig;
use anomap::evaluation::{pro, DiceMode, dice_iou};
use anomap::network::Model;
use anomap::pipeline::Detector;
use anomap::rng::stream;
use anomap::Exec;

const ARMS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn nearest(c: &mut Criterion) {
    let mut rng = stream(11, &[]);
    let anchors = Array2::from_shape_fn((512, 384), |_| rng.random_range(-1.0f32..1.0));
    let bank = AnchorBank::from_vectors(anchors, Space::Adapted).unwrap();
    let cells = Array2::from_shape_fn((1024, 384), |_| rng.random_range(-1.0..1.0));
    let mut g = c.benchmark_group("nearest_cells");
    for (name, exec) in ARMS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| bank.nearest_cells(black_box(cells.view()), exec).unwrap())
        });
    }
    g.finish();
}

fn coreset(c: &mut Criterion) {
    let mut rng = stream(12, &[]);
    let pool = Array2::from_shape_fn((4096, 384), |_| rng.random_range(-1.0..1.0));
    let mut g = c.benchmark_group("greedy_k_center");
    g.sample_size(10);
    for (name, exec) in ARMS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| greedy_k_center(black_box(pool.view()), 64, 0, exec))
        });
    }
    g.finish();
}

fn extraction(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let extractor = build_backbone(&cfg.backbone).unwrap();
    let mut rng = stream(13, &[]);
    let images: Vec<Array3<f32>> = (0..4)
        .map(|_| Array3::from_shape_fn((64, 64, 3), |_| rng.random::<f32>()))
        .collect();
    let mut g = c.benchmark_group("extract_batch");
    g.sample_size(10);
    for (name, exec) in ARMS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| extract_batch(extractor.as_ref(), black_box(&images), exec).unwrap())
        });
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.working_size = 64;
    cfg.network.disc_hidden = 128;
    let extractor: Arc<dyn FeatureExtractor> = Arc::from(build_backbone(&cfg.backbone).unwrap());
    let model = Model::init(extractor.out_dim(), &cfg.network, &mut stream(14, &[])).unwrap();
    let det = Detector::new(extractor, model, &cfg).unwrap();
    let mut rng = stream(15, &[]);
    let images: Vec<Array3<f32>> = (0..4)
        .map(|_| Array3::from_shape_fn((64, 64, 3), |_| rng.random::<f32>()))
        .collect();
    let refs: Vec<&Array3<f32>> = images.iter().collect();
    let mut g = c.benchmark_group("infer_batch");
    g.sample_size(10);
    for (name, exec) in ARMS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| det.infer_batch(black_box(&refs), None, exec).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = stream(16, &[]);
    let maps: Vec<Array2<f64>> = (0..8)
        .map(|_| Array2::from_shape_fn((128, 128), |_| rng.random::<f64>()))
        .collect();
    let masks: Vec<Array2<bool>> = (0..8)
        .map(|_| Array2::from_shape_fn((128, 128), |(y, x)| (40..70).contains(&y) && (50..90).contains(&x)))
        .collect();
    let mut g = c.benchmark_group("metrics");
    g.sample_size(10);
    g.bench_function("pro", |b| b.iter(|| pro(black_box(&maps), &masks, 0.3).unwrap()));
    g.bench_function("dice_best", |b| {
        b.iter(|| dice_iou(black_box(&maps), &masks, DiceMode::Best).unwrap())
    });
    g.finish();
}

criterion_group!(benches, nearest, coreset, extraction, inference, metrics);
criterion_main!(benches);
