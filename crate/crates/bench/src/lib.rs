//! Fixtures shared by the benchmarks.

use std::collections::BTreeSet;

use cloudhealth_core::{
    default_model, Collector, CollectorConfig, GoalSelection, KpiSample, MonitoringModel,
};

pub const SERVICES: [&str; 3] = ["frontend", "orders", "billing"];

/// Every goal of the default model that has metrics below it.
pub fn measurable_goals(model: &MonitoringModel) -> BTreeSet<String> {
    model
        .roots()
        .filter(|n| model.subtree_metrics([&n.id]).is_ok_and(|m| !m.is_empty()))
        .map(|n| n.id.clone())
        .collect()
}

pub fn full_selection(model: &MonitoringModel) -> GoalSelection {
    GoalSelection::new("bench", measurable_goals(model), SERVICES)
        .bind(model)
        .expect("goals exist")
}

/// `n` samples per (metric, service), one second apart.
pub fn samples(model: &MonitoringModel, n: u64) -> Vec<KpiSample> {
    let mut out = Vec::new();
    for def in model.metrics() {
        for service in SERVICES {
            for i in 0..n {
                out.push(KpiSample {
                    probe_id: "bench".into(),
                    service_id: service.into(),
                    metric_id: def.id.clone(),
                    ts: (i + 1) * 1000,
                    value: def.target + (i % 7) as f64,
                    unit: def.unit.clone(),
                });
            }
        }
    }
    out.sort_by_key(|s| s.ts);
    out
}

/// A collector holding `n` samples per series of the default model.
pub fn filled_collector(n: u64) -> (MonitoringModel, Collector) {
    let model = default_model();
    let collector = Collector::for_model(&model, CollectorConfig::default());
    collector.register_probe("bench");
    for s in samples(&model, n) {
        collector.ingest(&s).expect("fixture samples are valid");
    }
    (model, collector)
}
