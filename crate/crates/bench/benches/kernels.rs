use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use graphdet::detector::{backbone_forward, train_step, HrParams};
use graphdet::gam::{gam_forward_tensors, GamConfig, GamParams};
use graphdet::geometry::{roi_align, roi_bin_centers, Box};
use graphdet::graphs::{build_graph, NodeGeometry, SemanticMetric};
use graphdet::tensor::Tensor;
use graphdet_bench::bench_fixture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pixel_graph_forward(c: &mut Criterion) {
    // 49-node pixel graph at the default RoI resolution.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 49;
    let d = 32;
    let feats = Tensor::new(
        vec![n, d],
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let roi = Box::new(20.0, 20.0, 21.0, 21.0).unwrap();
    let geometry = NodeGeometry::Pixel {
        pixels: roi_bin_centers(&roi, 7),
        roi,
    };
    let cfg = GamConfig::new(d);
    let metric = SemanticMetric::default_dot();
    let params = GamParams::init(&cfg, metric.groups + 2, &mut rng).unwrap();
    let graph = build_graph(&feats, geometry, &metric).unwrap();

    c.bench_function("gam_forward_pixel_49", |b| {
        b.iter(|| gam_forward_tensors(black_box(&graph), &params, &cfg).unwrap())
    });
}

fn graph_build(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 49;
    let d = 32;
    let feats = Tensor::new(
        vec![n, d],
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let roi = Box::new(20.0, 20.0, 21.0, 21.0).unwrap();
    let metric = SemanticMetric::default_dot();
    c.bench_function("build_graph_pixel_49", |b| {
        b.iter(|| {
            let geometry = NodeGeometry::Pixel {
                pixels: roi_bin_centers(&roi, 7),
                roi,
            };
            build_graph(black_box(&feats), geometry, &metric).unwrap()
        })
    });
}

fn pooling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feat = Tensor::new(
        vec![32, 16, 16],
        (0..32 * 256).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let box_ = Box::new(30.0, 28.0, 22.0, 18.0).unwrap();
    c.bench_function("roi_align_32x7x7", |b| {
        b.iter(|| roi_align(black_box(&feat), &box_, 4.0, 7).unwrap())
    });
}

fn backbone(c: &mut Criterion) {
    let (cfg, params, scene, _) = bench_fixture();
    c.bench_function("backbone_64x64", |b| {
        b.iter(|| backbone_forward(black_box(&scene.image), &params, &cfg).unwrap())
    });
}

fn full_step(c: &mut Criterion) {
    let (cfg, params, scene, proposals) = bench_fixture();
    c.bench_function("train_step_default", |b| {
        b.iter(|| train_step(black_box(&params), &scene, &proposals, &cfg).unwrap())
    });
    let _ = HrParams::init(&cfg, 1).unwrap();
}

criterion_group!(
    benches,
    pixel_graph_forward,
    graph_build,
    pooling,
    backbone,
    full_step
);
criterion_main!(benches);
