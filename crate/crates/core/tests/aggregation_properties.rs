use std::collections::{BTreeMap, BTreeSet};

use cloudhealth_core::aggregator::{
    classify, snapshot, HealthSnapshot, HealthState, Thresholds, Window,
};
use cloudhealth_core::model::{Fold, GoalSelection, ModelDocument, MonitoringModel, NodeKind};
use cloudhealth_core::testkit::{random_model, random_selection, FixedSource};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SERVICE: &str = "svc";
const WINDOW: Window = Window {
    from: 0,
    to: 60_000,
};

/// Plain recursive fold straight off the document.
fn oracle(doc: &ModelDocument, values: &BTreeMap<String, f64>, id: &str) -> Option<f64> {
    let node = doc.nodes.iter().find(|n| n.id == id).unwrap();
    if node.kind == NodeKind::Metric {
        let def = doc.metrics.iter().find(|m| m.id == id).unwrap();
        let v = *values.get(id)?;
        return Some(((v - def.critical) / (def.target - def.critical)).clamp(0.0, 1.0));
    }
    let mut defined = Vec::new();
    for c in &node.children {
        let w = doc.nodes.iter().find(|n| &n.id == c).unwrap().weight;
        if let Some(s) = oracle(doc, values, c) {
            defined.push((s, w));
        }
    }
    if defined.is_empty() {
        return None;
    }
    if node.fold == Fold::Min {
        return defined
            .iter()
            .map(|p| p.0)
            .fold(None, |acc: Option<f64>, s| {
                Some(acc.map_or(s, |a| a.min(s)))
            });
    }
    let total: f64 = defined.iter().map(|p| p.1).sum();
    if total == 0.0 {
        Some(defined.iter().map(|p| p.0).sum::<f64>() / defined.len() as f64)
    } else {
        Some(defined.iter().map(|p| p.0 * p.1).sum::<f64>() / total)
    }
}

fn descendants(doc: &ModelDocument, id: &str, out: &mut BTreeSet<String>) {
    out.insert(id.to_string());
    let node = doc.nodes.iter().find(|n| n.id == id).unwrap();
    for c in &node.children {
        descendants(doc, c, out);
    }
}

struct Case {
    model: MonitoringModel,
    selection: GoalSelection,
    values: BTreeMap<String, f64>,
}

impl Case {
    fn random(rng: &mut ChaCha8Rng) -> Case {
        let model = random_model(rng, 20);
        let mut nodes = random_selection(rng, &model);
        if nodes.is_empty() {
            nodes.insert(model.roots().next().unwrap().id.clone());
        }
        let mut values = BTreeMap::new();
        for def in model.metrics() {
            if rng.gen_bool(0.85) {
                let (lo, hi) = (def.target.min(def.critical), def.target.max(def.critical));
                let span = hi - lo;
                values.insert(
                    def.id.clone(),
                    rng.gen_range(lo - span * 0.5..hi + span * 0.5),
                );
            }
        }
        let selection = GoalSelection::new("a", nodes, [SERVICE])
            .bind(&model)
            .unwrap();
        Case {
            model,
            selection,
            values,
        }
    }

    fn run(&self) -> HealthSnapshot {
        self.run_with(&self.model, &self.values)
    }

    fn run_with(&self, model: &MonitoringModel, values: &BTreeMap<String, f64>) -> HealthSnapshot {
        let mut source = FixedSource::new();
        for (m, v) in values {
            source.set(m, SERVICE, 1000, *v);
        }
        snapshot(
            model,
            &self.selection,
            WINDOW,
            &source,
            &Thresholds::default(),
        )
        .unwrap()
    }
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn scores_match_recursive_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = Case::random(&mut rng);
        let snap = case.run();
        let doc = case.model.to_document();

        let mut expected_nodes = BTreeSet::new();
        for id in &case.selection.node_ids {
            descendants(&doc, id, &mut expected_nodes);
        }
        prop_assert_eq!(snap.scores.keys().cloned().collect::<BTreeSet<_>>(), expected_nodes);

        for (id, ns) in &snap.scores {
            let want = oracle(&doc, &case.values, id);
            prop_assert!(close(ns.score, want, 1e-9), "{}: {:?} vs {:?}", id, ns.score, want);
            if let Some(s) = ns.score {
                prop_assert!((0.0..=1.0).contains(&s));
            }
            prop_assert_eq!(ns.score.is_none(), ns.state == HealthState::Unknown);
            let node = doc.nodes.iter().find(|n| &n.id == id).unwrap();
            let children: Vec<&String> = ns.contributing_children.iter().map(|c| &c.node_id).collect();
            prop_assert_eq!(children, node.children.iter().collect::<Vec<_>>());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn improving_a_metric_never_lowers_an_ancestor(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = Case::random(&mut rng);
        let defined: Vec<String> = case.values.keys().cloned().collect();
        prop_assume!(!defined.is_empty());
        let metric = defined.choose(&mut rng).unwrap().clone();
        let def = case.model.metric(&metric).unwrap().clone();
        let before = case.run();

        let mut values = case.values.clone();
        let v = values[&metric];
        let step = (def.target - def.critical) * rng.gen_range(0.0..=1.5);
        values.insert(metric.clone(), v + step);
        let after = case.run_with(&case.model, &values);

        let mut at = Some(metric.as_str());
        while let Some(id) = at {
            if let (Some(b), Some(a)) = (before.score(id), after.score(id)) {
                prop_assert!(a.score.unwrap_or(0.0) >= b.score.unwrap_or(0.0) - 1e-12, "{} dropped", id);
            }
            at = case.model.parent(id);
        }
    }

    #[test]
    fn scaling_sibling_weights_changes_nothing(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = Case::random(&mut rng);
        let before = case.run();

        let mut doc = case.model.to_document();
        let parents: Vec<String> =
            doc.nodes.iter().filter(|n| !n.children.is_empty()).map(|n| n.id.clone()).collect();
        let parent = parents.choose(&mut rng).unwrap().clone();
        let factor = rng.gen_range(0.01..100.0);
        let children: BTreeSet<String> =
            doc.nodes.iter().find(|n| n.id == parent).unwrap().children.iter().cloned().collect();
        for n in doc.nodes.iter_mut().filter(|n| children.contains(&n.id)) {
            n.weight *= factor;
        }
        let scaled = MonitoringModel::from_document(doc).unwrap();
        let after = case.run_with(&scaled, &case.values);

        for (id, b) in &before.scores {
            prop_assert!(close(b.score, after.scores[id].score, 1e-9), "{} changed", id);
        }
    }

    #[test]
    fn classification_follows_the_edges(score in 0.0f64..=1.0) {
        let want = if score >= 0.8 {
            HealthState::Healthy
        } else if score >= 0.5 {
            HealthState::Degraded
        } else {
            HealthState::Unhealthy
        };
        prop_assert_eq!(classify(Some(score)), want);
    }
}

#[test]
fn class_edges_are_exact() {
    let below = |x: f64| f64::from_bits(x.to_bits() - 1);
    assert_eq!(classify(Some(0.8)), HealthState::Healthy);
    assert_eq!(classify(Some(below(0.8))), HealthState::Degraded);
    assert_eq!(classify(Some(0.5)), HealthState::Degraded);
    assert_eq!(classify(Some(below(0.5))), HealthState::Unhealthy);
    assert_eq!(classify(Some(0.0)), HealthState::Unhealthy);
    assert_eq!(classify(None), HealthState::Unknown);
}

#[test]
fn uniform_children_fold_to_their_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let case = Case::random(&mut rng);
        for pick_target in [true, false] {
            let values: BTreeMap<String, f64> = case
                .model
                .metrics()
                .map(|d| {
                    (
                        d.id.clone(),
                        if pick_target { d.target } else { d.critical },
                    )
                })
                .collect();
            let snap = case.run_with(&case.model, &values);
            let want = if pick_target { 1.0 } else { 0.0 };
            assert!(snap.scores.values().all(|s| s.score == Some(want)));
        }
    }
}
