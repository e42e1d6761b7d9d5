//! Random generators for property tests and benchmarks.
//!
//! Only built with the `testkit` feature.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::collector::{CollectorError, Point, SeriesSource, SeriesWindow};
use crate::model::{
    Direction, Fold, MetricDef, ModelDocument, ModelNode, MonitoringModel, NodeKind, Statistic,
};
use crate::resolver::{Layer, ProbeAssignment};

struct TreeGen<'r, R: Rng> {
    rng: &'r mut R,
    nodes: Vec<ModelNode>,
    metrics: Vec<MetricDef>,
    seq: usize,
}

impl<R: Rng> TreeGen<'_, R> {
    fn push(&mut self, kind: NodeKind) -> usize {
        self.seq += 1;
        let prefix = match kind {
            NodeKind::Goal => "g",
            NodeKind::Subgoal => "s",
            NodeKind::Property => "p",
            NodeKind::Metric => "m",
        };
        let weight = if self.rng.gen_bool(0.1) {
            0.0
        } else {
            self.rng.gen_range(0.1..3.0)
        };
        let mut node = ModelNode::new(format!("{prefix}{}", self.seq), kind).with_weight(weight);
        if kind != NodeKind::Metric && self.rng.gen_bool(0.15) {
            node.fold = Fold::Min;
        }
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn link(&mut self, parent: usize, child: usize) {
        let id = self.nodes[child].id.clone();
        self.nodes[parent].children.push(id);
    }

    fn metric(&mut self) -> usize {
        let at = self.push(NodeKind::Metric);
        let direction = if self.rng.gen_bool(0.5) {
            Direction::LowerIsBetter
        } else {
            Direction::HigherIsBetter
        };
        let a = self.rng.gen_range(0.0..100.0);
        let b = a + self.rng.gen_range(1.0..100.0);
        let (target, critical) = match direction {
            Direction::LowerIsBetter => (a, b),
            Direction::HigherIsBetter => (b, a),
        };
        self.metrics.push(MetricDef {
            id: self.nodes[at].id.clone(),
            unit: "u".into(),
            direction,
            target,
            critical,
            probe_kind: "p".into(),
            window_s: 60.0,
            statistic: Statistic::Mean,
        });
        at
    }

    // Each generator uses at most `budget` nodes and at least its minimum:
    // property 2, subgoal 3, goal 4.

    fn property(&mut self, budget: usize) -> (usize, usize) {
        let at = self.push(NodeKind::Property);
        let n = self.rng.gen_range(1..=(budget - 1).min(3));
        for _ in 0..n {
            let m = self.metric();
            self.link(at, m);
        }
        (at, 1 + n)
    }

    fn subgoal(&mut self, budget: usize, depth: usize) -> (usize, usize) {
        let at = self.push(NodeKind::Subgoal);
        let mut used = 1;
        loop {
            let left = budget - used;
            let nest = depth < 2 && left >= 3 && self.rng.gen_bool(0.3);
            let (child, n) = if nest {
                let b = self.rng.gen_range(3..=left);
                self.subgoal(b, depth + 1)
            } else {
                let b = self.rng.gen_range(2..=left.min(4));
                self.property(b)
            };
            self.link(at, child);
            used += n;
            if budget - used < 2 || self.rng.gen_bool(0.5) {
                break;
            }
        }
        (at, used)
    }

    fn goal(&mut self, budget: usize) -> usize {
        let at = self.push(NodeKind::Goal);
        let mut used = 1;
        loop {
            let left = budget - used;
            let b = self.rng.gen_range(3..=left);
            let (child, n) = self.subgoal(b, 0);
            self.link(at, child);
            used += n;
            if budget - used < 3 || self.rng.gen_bool(0.5) {
                break;
            }
        }
        used
    }
}

/// A valid model with at most `max_nodes` nodes (at least 4). Weights are
/// random, some are zero, and some inner nodes use the min fold.
pub fn random_model<R: Rng>(rng: &mut R, max_nodes: usize) -> MonitoringModel {
    assert!(max_nodes >= 4, "a model needs at least four nodes");
    let mut gen = TreeGen {
        rng,
        nodes: Vec::new(),
        metrics: Vec::new(),
        seq: 0,
    };
    let mut used = 0;
    loop {
        let left = max_nodes - used;
        let b = gen.rng.gen_range(4..=left);
        used += gen.goal(b);
        if max_nodes - used < 4 || gen.rng.gen_bool(0.5) {
            break;
        }
    }
    let doc = ModelDocument {
        version: 1,
        nodes: gen.nodes,
        metrics: gen.metrics,
        stubs: Vec::new(),
    };
    MonitoringModel::from_document(doc).expect("generated models are valid")
}

/// A random subset of the model's node ids.
pub fn random_selection<R: Rng>(rng: &mut R, model: &MonitoringModel) -> BTreeSet<String> {
    let p = rng.gen_range(0.0..0.5);
    model
        .nodes()
        .filter(|_| rng.gen_bool(p))
        .map(|n| n.id.clone())
        .collect()
}

/// A random set of assignments over a small pool of probe kinds, services
/// and metrics. Assignment ids are unique.
pub fn random_assignments<R: Rng>(rng: &mut R) -> Vec<ProbeAssignment> {
    const KINDS: [&str; 3] = ["heartbeat", "latency-probe", "resource-probe"];
    const SERVICES: [&str; 3] = ["s1", "s2", "s3"];
    const METRICS: [&str; 4] = ["m1", "m2", "m3", "m4"];
    let mut out: BTreeMap<String, ProbeAssignment> = BTreeMap::new();
    for _ in 0..rng.gen_range(0..8) {
        let kind = KINDS.choose(rng).expect("non-empty");
        let service = SERVICES.choose(rng).expect("non-empty");
        let n = rng.gen_range(1..=METRICS.len());
        let metrics: Vec<&str> = METRICS.choose_multiple(rng, n).copied().collect();
        let mut a = ProbeAssignment::new(kind, service, Layer::VM, metrics);
        a.interval = *[500, 1000, 2000].choose(rng).expect("non-empty");
        out.insert(a.assignment_id.clone(), a);
    }
    out.into_values().collect()
}

/// Series held in memory, for driving the aggregator without a collector.
#[derive(Debug, Clone, Default)]
pub struct FixedSource {
    series: BTreeMap<(String, String), Vec<Point>>,
}

impl FixedSource {
    pub fn new() -> Self {
        FixedSource::default()
    }

    pub fn push(&mut self, metric_id: &str, service_id: &str, ts: u64, value: f64) {
        self.series
            .entry((metric_id.to_string(), service_id.to_string()))
            .or_default()
            .push(Point { ts, value });
    }

    /// Replaces the series with a single point.
    pub fn set(&mut self, metric_id: &str, service_id: &str, ts: u64, value: f64) {
        self.series.insert(
            (metric_id.to_string(), service_id.to_string()),
            vec![Point { ts, value }],
        );
    }
}

impl SeriesSource for FixedSource {
    fn window(
        &self,
        metric_id: &str,
        service_id: &str,
        from: u64,
        to: u64,
    ) -> Result<SeriesWindow, CollectorError> {
        let points = self
            .series
            .get(&(metric_id.to_string(), service_id.to_string()))
            .map(|s| {
                s.iter()
                    .filter(|p| p.ts >= from && p.ts < to)
                    .copied()
                    .collect()
            })
            .unwrap_or_default();
        Ok(SeriesWindow::new(metric_id, service_id, from, to, points))
    }
}
