//! Bottom-up health scoring over the model tree.
//!
//! Metric statistics are mapped linearly onto `[0, 1]` between their
//! critical and target values, averaged across the selected services, then
//! folded upwards. Missing data stays undefined and is left out of the fold
//! (the remaining weights are renormalized), so a silent probe shows up as
//! `Unknown` rather than as a failure.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::{CollectorError, SeriesSource};
use crate::model::{Direction, Fold, GoalSelection, MetricDef, MonitoringModel, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HealthState {
    Healthy,
    Degraded,
    Unhealthy,
    Unknown,
}

/// Lower class edges; each edge is inclusive for the class above it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub healthy: f64,
    pub degraded: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            healthy: 0.8,
            degraded: 0.5,
        }
    }
}

impl Thresholds {
    pub fn classify(&self, score: Option<f64>) -> HealthState {
        match score {
            None => HealthState::Unknown,
            Some(s) if s >= self.healthy => HealthState::Healthy,
            Some(s) if s >= self.degraded => HealthState::Degraded,
            Some(_) => HealthState::Unhealthy,
        }
    }
}

/// Classification with the default thresholds.
pub fn classify(score: Option<f64>) -> HealthState {
    Thresholds::default().classify(score)
}

pub fn normalize_metric(value: f64, def: &MetricDef) -> f64 {
    let raw = match def.direction {
        Direction::LowerIsBetter => (def.critical - value) / (def.critical - def.target),
        Direction::HigherIsBetter => (value - def.critical) / (def.target - def.critical),
    };
    raw.clamp(0.0, 1.0)
}

/// Folds `(score, weight)` pairs. Undefined children are skipped; if all are
/// undefined the result is undefined. When every defined child has weight
/// zero the weighted mean falls back to the plain mean.
pub fn fold_scores(fold: Fold, children: &[(Option<f64>, f64)]) -> Option<f64> {
    let defined: Vec<(f64, f64)> = children
        .iter()
        .filter_map(|&(s, w)| s.map(|s| (s, w)))
        .collect();
    if defined.is_empty() {
        return None;
    }
    match fold {
        Fold::Min => defined.iter().map(|&(s, _)| s).reduce(f64::min),
        Fold::WeightedMean => {
            let total: f64 = defined.iter().map(|&(_, w)| w).sum();
            if total > 0.0 {
                Some(defined.iter().map(|&(s, w)| s * w).sum::<f64>() / total)
            } else {
                Some(defined.iter().map(|&(s, _)| s).sum::<f64>() / defined.len() as f64)
            }
        }
    }
}

/// Scores `node_id` from its children's scores, using the node's fold.
pub fn score_node(
    model: &MonitoringModel,
    node_id: &str,
    child_scores: &[(Option<f64>, f64)],
) -> Option<f64> {
    let fold = model.node(node_id).map(|n| n.fold).unwrap_or_default();
    fold_scores(fold, child_scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub from: u64,
    pub to: u64,
}

impl Window {
    pub fn new(from: u64, to: u64) -> Self {
        Window { from, to }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildContribution {
    pub node_id: String,
    pub score: Option<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node_id: String,
    pub kind: NodeKind,
    /// `None` when no data reached this node.
    pub score: Option<f64>,
    pub state: HealthState,
    pub contributing_children: Vec<ChildContribution>,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric_id: String,
    pub service_id: String,
    /// The windowed statistic, `None` for an empty window.
    pub value: Option<f64>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRef {
    pub actor_id: String,
    pub node_ids: BTreeSet<String>,
    pub service_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthSnapshot {
    pub model_version: u64,
    pub selection: SelectionRef,
    pub window: Window,
    /// Selected nodes that have no selected ancestor.
    pub roots: Vec<String>,
    pub scores: BTreeMap<String, NodeScore>,
    pub metric_values: Vec<MetricValue>,
}

impl HealthSnapshot {
    pub fn score(&self, node_id: &str) -> Option<&NodeScore> {
        self.scores.get(node_id)
    }

    pub fn state(&self, node_id: &str) -> Option<HealthState> {
        self.scores.get(node_id).map(|s| s.state)
    }

    /// A node and the scores of its children, for drill-down.
    pub fn expand(&self, node_id: &str) -> Option<(&NodeScore, Vec<&NodeScore>)> {
        let node = self.scores.get(node_id)?;
        let children = node
            .contributing_children
            .iter()
            .filter_map(|c| self.scores.get(&c.node_id))
            .collect();
        Some((node, children))
    }
}

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("selection names unknown node `{0}`")]
    UnknownSelection(String),
    #[error("selection was made against model version {selection}, current is {model}")]
    VersionMismatch { selection: u64, model: u64 },
    #[error("empty or inverted window [{from}, {to})")]
    InvalidWindow { from: u64, to: u64 },
    #[error(transparent)]
    Source(#[from] CollectorError),
}

/// Scores every node in the selected subtrees over `window`.
pub fn snapshot(
    model: &MonitoringModel,
    selection: &GoalSelection,
    window: Window,
    source: &dyn SeriesSource,
    thresholds: &Thresholds,
) -> Result<HealthSnapshot, AggregateError> {
    if selection.model_version != model.version() {
        return Err(AggregateError::VersionMismatch {
            selection: selection.model_version,
            model: model.version(),
        });
    }
    if let Some(bad) = selection.node_ids.iter().find(|id| !model.contains(id)) {
        return Err(AggregateError::UnknownSelection(bad.clone()));
    }
    if window.from >= window.to {
        return Err(AggregateError::InvalidWindow {
            from: window.from,
            to: window.to,
        });
    }

    let roots: Vec<String> = selection
        .node_ids
        .iter()
        .filter(|id| {
            !selection
                .node_ids
                .iter()
                .any(|other| model.is_ancestor(other, id))
        })
        .cloned()
        .collect();

    let mut fold = Folder {
        model,
        selection,
        window,
        source,
        thresholds,
        scores: BTreeMap::new(),
        metric_values: Vec::new(),
    };
    for root in &roots {
        fold.score(root)?;
    }
    Ok(HealthSnapshot {
        model_version: model.version(),
        selection: SelectionRef {
            actor_id: selection.actor_id.clone(),
            node_ids: selection.node_ids.clone(),
            service_ids: selection.service_ids.clone(),
        },
        window,
        roots,
        scores: fold.scores,
        metric_values: fold.metric_values,
    })
}

struct Folder<'a> {
    model: &'a MonitoringModel,
    selection: &'a GoalSelection,
    window: Window,
    source: &'a dyn SeriesSource,
    thresholds: &'a Thresholds,
    scores: BTreeMap<String, NodeScore>,
    metric_values: Vec<MetricValue>,
}

impl Folder<'_> {
    fn score(&mut self, id: &str) -> Result<Option<f64>, AggregateError> {
        if let Some(done) = self.scores.get(id) {
            return Ok(done.score);
        }
        let node = self.model.node(id).expect("node ids come from the model");
        let mut contributing = Vec::new();
        let score = if node.kind == NodeKind::Metric {
            self.metric_score(id)?
        } else {
            let mut pairs = Vec::with_capacity(node.children.len());
            for child in &node.children {
                let s = self.score(child)?;
                let weight = self.model.node(child).map_or(1.0, |c| c.weight);
                pairs.push((s, weight));
                contributing.push(ChildContribution {
                    node_id: child.clone(),
                    score: s,
                    weight,
                });
            }
            fold_scores(node.fold, &pairs)
        };
        self.scores.insert(
            id.to_string(),
            NodeScore {
                node_id: id.to_string(),
                kind: node.kind,
                score,
                state: self.thresholds.classify(score),
                contributing_children: contributing,
                window: self.window,
            },
        );
        Ok(score)
    }

    fn metric_score(&mut self, metric_id: &str) -> Result<Option<f64>, AggregateError> {
        let def = self
            .model
            .metric(metric_id)
            .expect("metric nodes have definitions");
        let mut per_service = Vec::new();
        for service in &self.selection.service_ids {
            let w = self
                .source
                .window(metric_id, service, self.window.from, self.window.to)?;
            let value = w.stats.statistic(def.statistic);
            let score = value.map(|v| normalize_metric(v, def));
            per_service.push((score, 1.0));
            self.metric_values.push(MetricValue {
                metric_id: metric_id.to_string(),
                service_id: service.clone(),
                value,
                score,
            });
        }
        Ok(fold_scores(Fold::WeightedMean, &per_service))
    }
}
