use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use bevplan_core::fatg::{mamba_scan, wam_step, FatgConfig};
use bevplan_core::metrics::{evaluate, MetricThresholds, PdmsWeights};
use bevplan_core::microworld::{
    generate_scenario, render_semantic_bev, GridConfig, ScenarioConfig, ScenarioFamily,
};
use bevplan_core::pipeline::{fatg_forward, fit_vocabulary, generate_dataset, RunConfig};
use bevplan_core::rng::keyed_rng;
use bevplan_core::{ParamStore, Tape, Tensor};
use rand::Rng;

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = keyed_rng(seed, "bench");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor { shape: shape.to_vec(), data }
}

fn bench_mamba_scan(c: &mut Criterion) {
    let fc = FatgConfig::default();
    let mut store = ParamStore::new(0);
    let x0 = rand_tensor(1, &[256, 8]);
    c.bench_function("mamba_scan 256x8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let y = mamba_scan(&mut tape, &mut store, "bench.m", x, &fc).unwrap();
            black_box(tape.value(y).data[0])
        })
    });
}

fn bench_wam_step(c: &mut Criterion) {
    let gc = GridConfig { h: 16, w: 16, lx: 32.0, ly: 32.0, c: 8 };
    let fc = FatgConfig::default();
    let mut store = ParamStore::new(0);
    let v0 = rand_tensor(2, &[16, 16, 8]);
    c.bench_function("wam_step 16x16x8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let v = tape.input(v0.clone());
            let s = wam_step(&mut tape, &mut store, v, &gc, &fc).unwrap();
            black_box(tape.value(s).data[0])
        })
    });
}

fn bench_fatg_forward(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.anchors.n = 4;
    cfg.data.count = 8;
    let scenarios = generate_dataset(&cfg, cfg.data.count, 0).unwrap();
    let vocab = fit_vocabulary(&cfg, &scenarios).unwrap();
    let mut store = ParamStore::new(0);
    c.bench_function("fatg_forward 4 anchors", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let fwd = fatg_forward(&mut tape, &mut store, &cfg, &vocab, &scenarios[0]).unwrap();
            black_box(fwd.scene_tk.data[0])
        })
    });
}

fn bench_metric_oracle(c: &mut Criterion) {
    let cfg = ScenarioConfig::new(ScenarioFamily::DenseTraffic, 4);
    let scn = generate_scenario(5, &cfg).unwrap();
    let th = MetricThresholds::default();
    let w = PdmsWeights::default();
    c.bench_function("metric oracle dense traffic", |b| {
        b.iter(|| black_box(evaluate(&scn.expert, &scn, &th, &w).unwrap()))
    });
}

fn bench_bev_render(c: &mut Criterion) {
    let cfg = ScenarioConfig::new(ScenarioFamily::Intersection, 4);
    let scn = generate_scenario(6, &cfg).unwrap();
    let gc = GridConfig { h: 16, w: 16, lx: 32.0, ly: 32.0, c: 8 };
    c.bench_function("render_semantic_bev 16x16", |b| {
        b.iter(|| black_box(render_semantic_bev(&scn, 1.0, &gc)))
    });
}

criterion_group!(
    benches,
    bench_mamba_scan,
    bench_wam_step,
    bench_fatg_forward,
    bench_metric_oracle,
    bench_bev_render
);
criterion_main!(benches);
