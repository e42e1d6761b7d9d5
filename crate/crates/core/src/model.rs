//! The monitoring model: a forest of goal trees whose leaves are measurable
//! metrics.
//!
//! Every path from a root to a leaf follows `Goal → Subgoal+ → Property →
//! Metric`. Nodes that have not been refined yet are listed in `stubs` and
//! may be childless; selecting such a subtree alone fails with
//! [`ModelError::UnresolvedStub`] instead of silently resolving to nothing.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_MODEL: &str = include_str!("../data/default_model.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Goal,
    Subgoal,
    Property,
    Metric,
}

impl NodeKind {
    /// Whether a node of kind `self` may have a child of kind `child`.
    pub fn may_parent(self, child: NodeKind) -> bool {
        use NodeKind::*;
        matches!(
            (self, child),
            (Goal, Subgoal) | (Subgoal, Subgoal) | (Subgoal, Property) | (Property, Metric)
        )
    }
}

/// How a node combines the scores of its children.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fold {
    #[default]
    WeightedMean,
    /// Worst child wins. Opt-in for safety-critical subgoals.
    Min,
}

impl Fold {
    fn is_default(&self) -> bool {
        *self == Fold::WeightedMean
    }
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelNode {
    pub id: String,
    pub name: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub description: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    #[serde(default)]
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Fold::is_default")]
    pub fold: Fold,
}

impl ModelNode {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        let id = id.into();
        ModelNode {
            name: id.clone(),
            id,
            kind,
            description: String::new(),
            weight: 1.0,
            children: Vec::new(),
            fold: Fold::default(),
        }
    }

    pub fn with_children<I, S>(mut self, children: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.children = children.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Statistic {
    #[default]
    Mean,
    Max,
    Min,
    Sum,
    Count,
}

fn default_window_s() -> f64 {
    60.0
}

/// Scoring and collection parameters of a metric leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDef {
    pub id: String,
    pub unit: String,
    pub direction: Direction,
    /// Value at or beyond which the metric scores 1.
    pub target: f64,
    /// Value at or beyond which the metric scores 0.
    pub critical: f64,
    pub probe_kind: String,
    #[serde(default = "default_window_s")]
    pub window_s: f64,
    #[serde(default)]
    pub statistic: Statistic,
}

impl MetricDef {
    pub fn window_ms(&self) -> u64 {
        (self.window_s * 1000.0).round() as u64
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.unit.trim().is_empty() {
            out.push(Violation::EmptyUnit {
                id: self.id.clone(),
            });
        }
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            out.push(Violation::InvalidWindow {
                id: self.id.clone(),
            });
        }
        let ordered = match self.direction {
            Direction::LowerIsBetter => self.target < self.critical,
            Direction::HigherIsBetter => self.target > self.critical,
        };
        if !(self.target.is_finite() && self.critical.is_finite() && ordered) {
            out.push(Violation::ThresholdOrder {
                id: self.id.clone(),
            });
        }
        out
    }
}

/// Serialized form of a model. Field names are part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(default = "first_version")]
    pub version: u64,
    pub nodes: Vec<ModelNode>,
    #[serde(default)]
    pub metrics: Vec<MetricDef>,
    #[serde(default)]
    pub stubs: Vec<String>,
}

fn first_version() -> u64 {
    1
}

/// A single reason a model document is not a valid model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    #[error("duplicate node id `{id}`")]
    DuplicateId { id: String },
    #[error("duplicate metric definition `{id}`")]
    DuplicateMetric { id: String },
    #[error("node `{parent}` lists unknown child `{child}`")]
    DanglingChild { parent: String, child: String },
    #[error("cycle through node `{id}`")]
    Cycle { id: String },
    #[error("node `{id}` has more than one parent: {parents:?}")]
    MultipleParents { id: String, parents: Vec<String> },
    #[error("root node `{id}` is a {kind:?}, roots must be goals")]
    RootNotGoal { id: String, kind: NodeKind },
    #[error("{parent_kind:?} `{parent}` cannot have {child_kind:?} child `{child}`")]
    KindOrder {
        parent: String,
        parent_kind: NodeKind,
        child: String,
        child_kind: NodeKind,
    },
    #[error("{kind:?} `{id}` has no children and is not flagged as a stub")]
    NonMetricLeaf { id: String, kind: NodeKind },
    #[error("stub `{id}` is not a goal, subgoal or property of the model")]
    InvalidStub { id: String },
    #[error("metric node `{id}` has no metric definition")]
    MissingMetricDef { id: String },
    #[error("metric definition `{id}` does not reference a metric node")]
    OrphanMetricDef { id: String },
    #[error("metric `{id}` has thresholds in the wrong order for its direction")]
    ThresholdOrder { id: String },
    #[error("metric `{id}` has a non-positive window")]
    InvalidWindow { id: String },
    #[error("metric `{id}` has an empty unit")]
    EmptyUnit { id: String },
    #[error("node `{id}` has a negative or non-finite weight")]
    InvalidWeight { id: String },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed model document: {0}")]
    Parse(String),
    #[error("invalid model ({} violation(s))", .0.len())]
    Validation(Vec<Violation>),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{0}` does not reach any metric yet")]
    UnresolvedStub(String),
    #[error("nodes still referenced by active selections: {0:?}")]
    Conflict(Vec<String>),
}

/// A validated, immutable monitoring model.
///
/// Extension produces a new value with a bumped version, so readers can keep
/// using the previous one.
#[derive(Debug, Clone)]
pub struct MonitoringModel {
    version: u64,
    nodes: IndexMap<String, ModelNode>,
    metrics: IndexMap<String, MetricDef>,
    stubs: BTreeSet<String>,
    parents: HashMap<String, String>,
}

/// Parses and validates a model document. The returned model has version 1.
pub fn load_model(text: &str) -> Result<MonitoringModel, ModelError> {
    let mut model = parse_document(text)?;
    model.version = 1;
    Ok(model)
}

/// Like [`load_model`] but keeps the version recorded in the document.
pub fn parse_document(text: &str) -> Result<MonitoringModel, ModelError> {
    let doc: ModelDocument =
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
    MonitoringModel::from_document(doc)
}

/// The built-in model shipped with the crate.
pub fn default_model() -> MonitoringModel {
    load_model(DEFAULT_MODEL).expect("built-in model is valid")
}

/// Raw text of the built-in model document.
pub fn default_model_document() -> &'static str {
    DEFAULT_MODEL
}

/// Checks a document against every model invariant and returns all
/// violations found (empty when valid).
pub fn validate(doc: &ModelDocument) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut by_id: IndexMap<&str, &ModelNode> = IndexMap::new();
    for node in &doc.nodes {
        if by_id.contains_key(node.id.as_str()) {
            out.push(Violation::DuplicateId {
                id: node.id.clone(),
            });
        } else {
            by_id.insert(node.id.as_str(), node);
        }
        if !(node.weight.is_finite() && node.weight >= 0.0) {
            out.push(Violation::InvalidWeight {
                id: node.id.clone(),
            });
        }
    }

    let mut parents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for node in by_id.values() {
        for child in &node.children {
            match by_id.get(child.as_str()) {
                None => out.push(Violation::DanglingChild {
                    parent: node.id.clone(),
                    child: child.clone(),
                }),
                Some(c) => {
                    parents
                        .entry(c.id.as_str())
                        .or_default()
                        .push(node.id.as_str());
                    if !node.kind.may_parent(c.kind) {
                        out.push(Violation::KindOrder {
                            parent: node.id.clone(),
                            parent_kind: node.kind,
                            child: c.id.clone(),
                            child_kind: c.kind,
                        });
                    }
                }
            }
        }
    }
    for (id, ps) in &parents {
        if ps.len() > 1 {
            out.push(Violation::MultipleParents {
                id: id.to_string(),
                parents: ps.iter().map(|p| p.to_string()).collect(),
            });
        }
    }
    for node in by_id.values() {
        if !parents.contains_key(node.id.as_str()) && node.kind != NodeKind::Goal {
            out.push(Violation::RootNotGoal {
                id: node.id.clone(),
                kind: node.kind,
            });
        }
    }
    out.extend(find_cycles(&by_id));

    let stubs: BTreeSet<&str> = doc.stubs.iter().map(String::as_str).collect();
    for stub in &stubs {
        match by_id.get(stub) {
            Some(n) if n.kind != NodeKind::Metric => {}
            _ => out.push(Violation::InvalidStub {
                id: stub.to_string(),
            }),
        }
    }
    for node in by_id.values() {
        if node.children.is_empty()
            && node.kind != NodeKind::Metric
            && !stubs.contains(node.id.as_str())
        {
            out.push(Violation::NonMetricLeaf {
                id: node.id.clone(),
                kind: node.kind,
            });
        }
    }

    let mut defs: BTreeSet<&str> = BTreeSet::new();
    for def in &doc.metrics {
        if !defs.insert(def.id.as_str()) {
            out.push(Violation::DuplicateMetric { id: def.id.clone() });
        }
        match by_id.get(def.id.as_str()) {
            Some(n) if n.kind == NodeKind::Metric => {}
            _ => out.push(Violation::OrphanMetricDef { id: def.id.clone() }),
        }
        out.extend(def.violations());
    }
    for node in by_id.values() {
        if node.kind == NodeKind::Metric && !defs.contains(node.id.as_str()) {
            out.push(Violation::MissingMetricDef {
                id: node.id.clone(),
            });
        }
    }
    out
}

fn find_cycles(by_id: &IndexMap<&str, &ModelNode>) -> Vec<Violation> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Fresh,
        Open,
        Done,
    }
    let mut marks: HashMap<&str, Mark> = by_id.keys().map(|k| (*k, Mark::Fresh)).collect();
    let mut found = BTreeSet::new();

    for start in by_id.keys() {
        if marks[start] != Mark::Fresh {
            continue;
        }
        // iterative DFS: (node, next child index)
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        marks.insert(start, Mark::Open);
        while let Some((id, idx)) = stack.pop() {
            let node = by_id[id];
            if idx < node.children.len() {
                stack.push((id, idx + 1));
                let child = node.children[idx].as_str();
                match marks.get(child).copied() {
                    Some(Mark::Fresh) => {
                        marks.insert(child, Mark::Open);
                        stack.push((child, 0));
                    }
                    Some(Mark::Open) => {
                        found.insert(child.to_string());
                    }
                    _ => {}
                }
            } else {
                marks.insert(id, Mark::Done);
            }
        }
    }
    found
        .into_iter()
        .map(|id| Violation::Cycle { id })
        .collect()
}

impl MonitoringModel {
    pub fn from_document(doc: ModelDocument) -> Result<Self, ModelError> {
        let violations = validate(&doc);
        if !violations.is_empty() {
            return Err(ModelError::Validation(violations));
        }
        let mut parents = HashMap::new();
        for node in &doc.nodes {
            for child in &node.children {
                parents.insert(child.clone(), node.id.clone());
            }
        }
        Ok(MonitoringModel {
            version: doc.version.max(1),
            nodes: doc.nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            metrics: doc.metrics.into_iter().map(|m| (m.id.clone(), m)).collect(),
            stubs: doc.stubs.into_iter().collect(),
            parents,
        })
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            version: self.version,
            nodes: self.nodes.values().cloned().collect(),
            metrics: self.metrics.values().cloned().collect(),
            stubs: self.stubs.iter().cloned().collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("model serializes")
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn node(&self, id: &str) -> Option<&ModelNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ModelNode> {
        self.nodes.values()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn metric(&self, id: &str) -> Option<&MetricDef> {
        self.metrics.get(id)
    }

    pub fn metrics(&self) -> impl Iterator<Item = &MetricDef> {
        self.metrics.values()
    }

    pub fn parent(&self, id: &str) -> Option<&str> {
        self.parents.get(id).map(String::as_str)
    }

    pub fn is_stub(&self, id: &str) -> bool {
        self.stubs.contains(id)
    }

    pub fn stubs(&self) -> &BTreeSet<String> {
        &self.stubs
    }

    /// Root goals in document order.
    pub fn roots(&self) -> impl Iterator<Item = &ModelNode> {
        self.nodes
            .values()
            .filter(|n| !self.parents.contains_key(&n.id))
    }

    pub fn children(&self, id: &str) -> impl Iterator<Item = &ModelNode> {
        self.nodes
            .get(id)
            .into_iter()
            .flat_map(|n| n.children.iter())
            .filter_map(|c| self.nodes.get(c))
    }

    /// All node ids in the subtree rooted at `id`, root first (pre-order).
    pub fn subtree(&self, id: &str) -> Vec<&str> {
        let mut out = Vec::new();
        let mut stack = match self.nodes.get_key_value(id) {
            Some((k, _)) => vec![k.as_str()],
            None => return out,
        };
        while let Some(cur) = stack.pop() {
            out.push(cur);
            for child in self.nodes[cur].children.iter().rev() {
                stack.push(child.as_str());
            }
        }
        out
    }

    /// Whether `ancestor` lies strictly above `id`.
    pub fn is_ancestor(&self, ancestor: &str, id: &str) -> bool {
        let mut cur = self.parent(id);
        while let Some(p) = cur {
            if p == ancestor {
                return true;
            }
            cur = self.parent(p);
        }
        false
    }

    /// Metric leaves reachable from the given nodes.
    pub fn subtree_metrics<'a, I>(&self, node_ids: I) -> Result<BTreeSet<String>, ModelError>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut out = BTreeSet::new();
        for id in node_ids {
            if !self.contains(id) {
                return Err(ModelError::UnknownNode(id.clone()));
            }
            let mut reached = false;
            for n in self.subtree(id) {
                if self.nodes[n].kind == NodeKind::Metric {
                    out.insert(n.to_string());
                    reached = true;
                }
            }
            if !reached {
                return Err(ModelError::UnresolvedStub(id.clone()));
            }
        }
        Ok(out)
    }

    /// Structural equality: same nodes, metric definitions and stubs,
    /// regardless of version.
    pub fn same_structure(&self, other: &MonitoringModel) -> bool {
        self.nodes == other.nodes && self.metrics == other.metrics && self.stubs == other.stubs
    }

    /// Applies a patch and returns the next model version.
    ///
    /// `referenced` holds the node ids named by active selections; removing
    /// any of them (or a node whose subtree contains one) is a conflict.
    pub fn extend(
        &self,
        patch: &ModelPatch,
        referenced: &BTreeSet<String>,
    ) -> Result<MonitoringModel, ModelError> {
        let mut doc = self.to_document();
        let mut violations = Vec::new();

        let mut removed: BTreeSet<String> = BTreeSet::new();
        for id in &patch.remove_nodes {
            if !self.contains(id) {
                return Err(ModelError::UnknownNode(id.clone()));
            }
            removed.extend(self.subtree(id).into_iter().map(str::to_string));
        }
        let conflicts: Vec<String> = removed.intersection(referenced).cloned().collect();
        if !conflicts.is_empty() {
            return Err(ModelError::Conflict(conflicts));
        }
        doc.nodes.retain(|n| !removed.contains(&n.id));
        doc.metrics.retain(|m| !removed.contains(&m.id));
        doc.stubs.retain(|s| !removed.contains(s));
        for node in &mut doc.nodes {
            node.children.retain(|c| !removed.contains(c));
        }

        for node in &patch.replace_nodes {
            match doc.nodes.iter_mut().find(|n| n.id == node.id) {
                Some(slot) => *slot = node.clone(),
                None => return Err(ModelError::UnknownNode(node.id.clone())),
            }
        }
        for def in &patch.replace_metrics {
            match doc.metrics.iter_mut().find(|m| m.id == def.id) {
                Some(slot) => *slot = def.clone(),
                None => return Err(ModelError::UnknownNode(def.id.clone())),
            }
        }
        for node in &patch.add_nodes {
            if doc.nodes.iter().any(|n| n.id == node.id) {
                violations.push(Violation::DuplicateId {
                    id: node.id.clone(),
                });
            }
            doc.nodes.push(node.clone());
        }
        for def in &patch.add_metrics {
            if doc.metrics.iter().any(|m| m.id == def.id) {
                violations.push(Violation::DuplicateMetric { id: def.id.clone() });
            }
            doc.metrics.push(def.clone());
        }
        for link in &patch.attach {
            match doc.nodes.iter_mut().find(|n| n.id == link.parent) {
                Some(parent) => {
                    if !parent.children.contains(&link.child) {
                        parent.children.push(link.child.clone());
                    }
                }
                None => return Err(ModelError::UnknownNode(link.parent.clone())),
            }
        }
        doc.stubs.retain(|s| !patch.remove_stubs.contains(s));
        for s in &patch.add_stubs {
            if !doc.stubs.contains(s) {
                doc.stubs.push(s.clone());
            }
        }

        // Validation reports duplicates again; keep each violation once.
        for v in validate(&doc) {
            if !violations.contains(&v) {
                violations.push(v);
            }
        }
        if !violations.is_empty() {
            return Err(ModelError::Validation(violations));
        }
        doc.version = self.version + 1;
        MonitoringModel::from_document(doc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attach {
    pub parent: String,
    pub child: String,
}

/// A change set for [`MonitoringModel::extend`]. All lists default to empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelPatch {
    pub add_nodes: Vec<ModelNode>,
    pub replace_nodes: Vec<ModelNode>,
    pub add_metrics: Vec<MetricDef>,
    pub replace_metrics: Vec<MetricDef>,
    /// Removes each listed node together with its subtree.
    pub remove_nodes: Vec<String>,
    /// Appends `child` to the children of an existing `parent`.
    pub attach: Vec<Attach>,
    pub add_stubs: Vec<String>,
    pub remove_stubs: Vec<String>,
}

/// Which nodes an operator (actor) wants to watch, on which services.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSelection {
    pub actor_id: String,
    pub node_ids: BTreeSet<String>,
    pub service_ids: BTreeSet<String>,
    #[serde(default)]
    pub created_at: u64,
    /// Version of the model the selection was resolved against.
    #[serde(default = "first_version")]
    pub model_version: u64,
}

impl GoalSelection {
    pub fn new<N, S>(actor_id: impl Into<String>, node_ids: N, service_ids: S) -> Self
    where
        N: IntoIterator,
        N::Item: Into<String>,
        S: IntoIterator,
        S::Item: Into<String>,
    {
        GoalSelection {
            actor_id: actor_id.into(),
            node_ids: node_ids.into_iter().map(Into::into).collect(),
            service_ids: service_ids.into_iter().map(Into::into).collect(),
            created_at: 0,
            model_version: 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// Checks the selection against a model and stamps its version.
    pub fn bind(mut self, model: &MonitoringModel) -> Result<Self, ModelError> {
        if let Some(bad) = self.node_ids.iter().find(|id| !model.contains(id)) {
            return Err(ModelError::UnknownNode(bad.clone()));
        }
        self.model_version = model.version();
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn metric_def(id: &str) -> MetricDef {
        MetricDef {
            id: id.into(),
            unit: "ms".into(),
            direction: Direction::LowerIsBetter,
            target: 1.0,
            critical: 2.0,
            probe_kind: "p".into(),
            window_s: 60.0,
            statistic: Statistic::Mean,
        }
    }

    fn tiny_doc() -> ModelDocument {
        ModelDocument {
            version: 1,
            nodes: vec![
                ModelNode::new("G", NodeKind::Goal).with_children(["S"]),
                ModelNode::new("S", NodeKind::Subgoal).with_children(["P"]),
                ModelNode::new("P", NodeKind::Property).with_children(["m"]),
                ModelNode::new("m", NodeKind::Metric),
            ],
            metrics: vec![metric_def("m")],
            stubs: vec![],
        }
    }

    #[test]
    fn default_model_has_seven_goal_roots() {
        let m = default_model();
        let roots: Vec<&str> = m.roots().map(|n| n.id.as_str()).collect();
        assert_eq!(
            roots,
            [
                "Reliability",
                "Responsiveness",
                "Adaptability",
                "Effectiveness",
                "Efficiency",
                "Compatibility",
                "Performance"
            ]
        );
        assert!(m.roots().all(|n| n.kind == NodeKind::Goal));
        assert_eq!(m.version(), 1);
    }

    #[test]
    fn reliability_has_three_subgoals() {
        let m = default_model();
        let kids: Vec<_> = m.children("Reliability").collect();
        assert_eq!(kids.len(), 3);
        assert!(kids.iter().all(|n| n.kind == NodeKind::Subgoal));
        let names: BTreeSet<_> = kids.iter().map(|n| n.id.clone()).collect();
        assert_eq!(
            names,
            set(&["Continuity", "Recoverability", "Availability"])
        );
    }

    #[test]
    fn time_behaviour_resolves_to_three_metrics() {
        let m = default_model();
        let got = m.subtree_metrics(&set(&["TimeBehaviour"])).unwrap();
        assert_eq!(got, set(&["response_time", "latency", "throughput"]));
    }

    #[test]
    fn trivial_selections() {
        let m = default_model();
        assert!(m.subtree_metrics(&set(&[])).unwrap().is_empty());
        assert_eq!(
            m.subtree_metrics(&set(&["latency"])).unwrap(),
            set(&["latency"])
        );
        assert!(matches!(
            m.subtree_metrics(&set(&["Nope"])),
            Err(ModelError::UnknownNode(_))
        ));
        assert!(matches!(
            m.subtree_metrics(&set(&["Efficiency"])),
            Err(ModelError::UnresolvedStub(id)) if id == "Efficiency"
        ));
        // a stub below a resolvable goal does not poison the goal
        let rel = m.subtree_metrics(&set(&["Reliability"])).unwrap();
        assert_eq!(
            rel,
            set(&["failure_count", "failure_duration", "recovery_time"])
        );
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let mut doc = tiny_doc();
        doc.nodes[1].children.push("S".into());
        let v = validate(&doc);
        assert!(v.contains(&Violation::Cycle { id: "S".into() }), "{v:?}");
    }

    #[test]
    fn property_cannot_parent_subgoal() {
        let mut doc = tiny_doc();
        doc.nodes
            .push(ModelNode::new("S2", NodeKind::Subgoal).with_children(["P2"]));
        doc.nodes
            .push(ModelNode::new("P2", NodeKind::Property).with_children(["m2"]));
        doc.nodes.push(ModelNode::new("m2", NodeKind::Metric));
        doc.metrics.push(metric_def("m2"));
        doc.nodes[2].children.push("S2".into());
        let v = validate(&doc);
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::KindOrder { child, .. } if child == "S2")));
    }

    #[test]
    fn validation_collects_every_violation() {
        let mut doc = tiny_doc();
        doc.nodes.push(ModelNode::new("G", NodeKind::Goal));
        doc.nodes[0].children.push("ghost".into());
        doc.metrics[0].target = 5.0;
        doc.metrics.push(metric_def("not_a_node"));
        doc.nodes.push(ModelNode::new("lonely", NodeKind::Metric));
        let v = validate(&doc);
        assert!(v.contains(&Violation::DuplicateId { id: "G".into() }));
        assert!(v.contains(&Violation::DanglingChild {
            parent: "G".into(),
            child: "ghost".into()
        }));
        assert!(v.contains(&Violation::ThresholdOrder { id: "m".into() }));
        assert!(v.contains(&Violation::OrphanMetricDef {
            id: "not_a_node".into()
        }));
        assert!(v.contains(&Violation::MissingMetricDef {
            id: "lonely".into()
        }));
        assert!(v.contains(&Violation::RootNotGoal {
            id: "lonely".into(),
            kind: NodeKind::Metric
        }));
    }

    #[test]
    fn unflagged_childless_goal_is_rejected() {
        let mut doc = tiny_doc();
        doc.nodes.push(ModelNode::new("Bare", NodeKind::Goal));
        assert!(validate(&doc).contains(&Violation::NonMetricLeaf {
            id: "Bare".into(),
            kind: NodeKind::Goal
        }));
        doc.stubs.push("Bare".into());
        assert!(validate(&doc).is_empty());
    }

    #[test]
    fn malformed_document_is_a_parse_error() {
        assert!(matches!(
            load_model("{\"nodes\": 3}"),
            Err(ModelError::Parse(_))
        ));
        assert!(matches!(load_model("not json"), Err(ModelError::Parse(_))));
    }

    #[test]
    fn round_trip_preserves_structure() {
        let m = default_model();
        let again = load_model(&m.to_json()).unwrap();
        assert!(m.same_structure(&again));
    }

    #[test]
    fn load_resets_version() {
        let mut doc = tiny_doc();
        doc.version = 9;
        let text = serde_json::to_string(&doc).unwrap();
        assert_eq!(load_model(&text).unwrap().version(), 1);
        assert_eq!(parse_document(&text).unwrap().version(), 9);
    }

    fn security_patch() -> ModelPatch {
        let mut conf = metric_def("unauthorized_access");
        conf.unit = "count".into();
        conf.target = 0.0;
        conf.critical = 5.0;
        ModelPatch {
            add_nodes: vec![
                ModelNode::new("Security", NodeKind::Goal)
                    .with_children(["Confidentiality", "Integrity"]),
                ModelNode::new("Confidentiality", NodeKind::Subgoal)
                    .with_children(["AccessControl"]),
                ModelNode::new("AccessControl", NodeKind::Property)
                    .with_children(["unauthorized_access"]),
                ModelNode::new("unauthorized_access", NodeKind::Metric),
                ModelNode::new("Integrity", NodeKind::Subgoal).with_children(["TamperEvidence"]),
                ModelNode::new("TamperEvidence", NodeKind::Property)
                    .with_children(["checksum_failures"]),
                ModelNode::new("checksum_failures", NodeKind::Metric),
            ],
            add_metrics: vec![conf, {
                let mut d = metric_def("checksum_failures");
                d.unit = "count".into();
                d.target = 0.0;
                d
            }],
            ..Default::default()
        }
    }

    #[test]
    fn extend_with_security_goal() {
        let m = default_model();
        let next = m.extend(&security_patch(), &BTreeSet::new()).unwrap();
        assert_eq!(next.roots().count(), 8);
        assert_eq!(next.version(), 2);
        assert_eq!(
            next.subtree_metrics(&set(&["Security"])).unwrap(),
            set(&["unauthorized_access", "checksum_failures"])
        );
        // previous version untouched
        assert_eq!(m.roots().count(), 7);
    }

    #[test]
    fn empty_patch_bumps_version_only() {
        let m = default_model();
        let next = m.extend(&ModelPatch::default(), &BTreeSet::new()).unwrap();
        assert!(next.same_structure(&m));
        assert_eq!(next.version(), m.version() + 1);
    }

    #[test]
    fn duplicate_metric_in_patch_is_rejected() {
        let m = default_model();
        let patch = ModelPatch {
            add_nodes: vec![ModelNode::new("latency", NodeKind::Metric)],
            add_metrics: vec![metric_def("latency")],
            ..Default::default()
        };
        match m.extend(&patch, &BTreeSet::new()) {
            Err(ModelError::Validation(v)) => {
                assert!(v.contains(&Violation::DuplicateId {
                    id: "latency".into()
                }));
                assert!(v.contains(&Violation::DuplicateMetric {
                    id: "latency".into()
                }));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn removing_referenced_node_conflicts() {
        let m = default_model();
        let patch = ModelPatch {
            remove_nodes: vec!["Capacity".into()],
            ..Default::default()
        };
        let err = m.extend(&patch, &set(&["workload_size"])).unwrap_err();
        assert!(matches!(err, ModelError::Conflict(ids) if ids == ["workload_size"]));

        let next = m.extend(&patch, &set(&["Reliability"])).unwrap();
        assert!(!next.contains("Capacity"));
        assert!(!next.contains("workload_size"));
        assert!(next.metric("workload_size").is_none());
        assert_eq!(next.children("Performance").count(), 2);
    }

    #[test]
    fn attach_refines_a_stub() {
        let m = default_model();
        let mut def = metric_def("replica_consistency");
        def.unit = "ratio".into();
        def.direction = Direction::HigherIsBetter;
        def.target = 1.0;
        def.critical = 0.9;
        let patch = ModelPatch {
            add_nodes: vec![ModelNode::new("replica_consistency", NodeKind::Metric)],
            add_metrics: vec![def],
            attach: vec![Attach {
                parent: "ReplicaConsistency".into(),
                child: "replica_consistency".into(),
            }],
            remove_stubs: vec!["ReplicaConsistency".into()],
            ..Default::default()
        };
        let next = m.extend(&patch, &BTreeSet::new()).unwrap();
        assert!(next
            .subtree_metrics(&set(&["Recoverability"]))
            .unwrap()
            .contains("replica_consistency"));
    }

    #[test]
    fn selection_bind_checks_nodes() {
        let m = default_model();
        let sel = GoalSelection::new("ops", ["Performance"], ["s1"]);
        assert_eq!(sel.clone().bind(&m).unwrap().model_version, 1);
        let bad = GoalSelection::new("ops", ["Nope"], ["s1"]);
        assert!(bad.bind(&m).is_err());
    }
}
