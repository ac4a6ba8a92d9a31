use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use lidarsplat::condition::rasterize_condition_with;
use lidarsplat::gsplat::{render, render_backward, RenderConfig};
use lidarsplat::pointcloud::{aggregate, decompose_scene};
use lidarsplat::synthetic::{
    forward_camera, random_render_weights, random_splat_scene, street_scene, SplatSceneOptions, StreetOptions,
};
use lidarsplat::Parallelism;

const MODES: [(&str, Parallelism); 2] = [("serial", Parallelism::Serial), ("parallel", Parallelism::Parallel)];

fn splat(c: &mut Criterion) {
    let opts = SplatSceneOptions {
        background: 2000,
        objects: 4,
        per_object: 100,
        width: 256,
        height: 192,
        focal: 220.0,
        ..Default::default()
    };
    let f = random_splat_scene(11, &opts);
    let weights = random_render_weights(12, opts.width as usize, opts.height as usize);

    let mut group = c.benchmark_group("render");
    group.sample_size(20);
    for (name, par) in MODES {
        let cfg = RenderConfig::default().with_parallelism(par);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| render(black_box(&f.scene), &f.camera, f.time, &cfg).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("render_backward");
    group.sample_size(20);
    for (name, par) in MODES {
        let cfg = RenderConfig::default().with_parallelism(par);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| render_backward(black_box(&f.scene), &f.camera, f.time, &cfg, &weights).unwrap())
        });
    }
    group.finish();
}

fn condition(c: &mut Criterion) {
    let opts = StreetOptions {
        frames: 8,
        ..Default::default()
    };
    let scene = street_scene(3, &opts).unwrap().scene;
    let cloud = decompose_scene(&scene, Parallelism::Parallel).unwrap();
    let agg = aggregate(&cloud, &scene.manifest.tracklets, 0.3, 1.0, None).unwrap();
    let camera = forward_camera(512, 288, 400.0);

    let mut group = c.benchmark_group("rasterize_condition");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| rasterize_condition_with(black_box(&agg), &camera, 0.01, par))
        });
    }
    group.finish();
}

criterion_group!(benches, splat, condition);
criterion_main!(benches);
