use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use cloudhealth_bench::{filled_collector, full_selection, measurable_goals, samples, SERVICES};
use cloudhealth_core::{
    default_catalog, default_model, demo_scenario, plan_diff, resolve_probes, snapshot,
    start_scenario, Collector, CollectorConfig, Deployer, Layer, ServiceDescriptor, Thresholds,
    Window,
};

fn bench_snapshot(c: &mut Criterion) {
    let (model, collector) = filled_collector(600);
    let selection = full_selection(&model);
    let thresholds = Thresholds::default();
    c.bench_function("snapshot/full model, 3 services, 60 s window", |b| {
        b.iter(|| {
            snapshot(
                &model,
                &selection,
                black_box(Window::new(540_000, 600_001)),
                &collector,
                &thresholds,
            )
        })
    });
}

fn bench_resolve(c: &mut Criterion) {
    let model = default_model();
    let catalog = default_catalog();
    let metrics = model.subtree_metrics(&measurable_goals(&model)).unwrap();
    let services: Vec<ServiceDescriptor> = (0..20)
        .map(|i| ServiceDescriptor::new(format!("s{i}"), Layer::VM))
        .collect();
    c.bench_function("resolve_probes/all metrics, 20 services", |b| {
        b.iter(|| resolve_probes(black_box(&metrics), &services, &catalog, &model))
    });

    let before = resolve_probes(&metrics, &services[..10], &catalog, &model).unwrap();
    let after = resolve_probes(&metrics, &services[5..], &catalog, &model).unwrap();
    c.bench_function("plan_diff/overlapping halves", |b| {
        b.iter(|| plan_diff(black_box(&before), &after))
    });
}

fn bench_collector(c: &mut Criterion) {
    let model = default_model();
    let batch = samples(&model, 100);
    let mut group = c.benchmark_group("collector");
    group.throughput(Throughput::Elements(batch.len() as u64));
    group.bench_function("ingest", |b| {
        b.iter_batched(
            || {
                let c = Collector::for_model(&model, CollectorConfig::default());
                c.register_probe("bench");
                c
            },
            |c| {
                for s in &batch {
                    c.ingest(s).unwrap();
                }
                c
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();

    let (_, collector) = filled_collector(3600);
    c.bench_function("collector/query 5 min of 1 h", |b| {
        b.iter(|| collector.query("latency", SERVICES[0], black_box(1_800_000), 2_100_000))
    });
}

fn bench_simulation(c: &mut Criterion) {
    let spec = demo_scenario();
    let model = default_model();
    let catalog = default_catalog();
    let metrics = model.subtree_metrics(&measurable_goals(&model)).unwrap();
    c.bench_function("simenv/deploy all probes then run 60 s", |b| {
        b.iter(|| {
            let mut env = start_scenario(&spec).unwrap();
            let services: Vec<ServiceDescriptor> = env.services();
            let probes = resolve_probes(&metrics, &services, &catalog, &model).unwrap();
            Deployer::default().apply_plan(&plan_diff(&[], &probes), &mut env);
            env.advance(60_000).len()
        })
    });
}

criterion_group!(
    benches,
    bench_snapshot,
    bench_resolve,
    bench_collector,
    bench_simulation
);
criterion_main!(benches);
