//! Metric sets → probe assignments, and assignment sets → deployment plans.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MonitoringModel;

const DEFAULT_CATALOG: &str = include_str!("../data/default_catalog.json");

/// Architecture layer a service runs at, and a probe can observe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    VM,
    Container,
    PaaS,
    Process,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for Layer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vm" => Ok(Layer::VM),
            "container" => Ok(Layer::Container),
            "paas" => Ok(Layer::PaaS),
            "process" => Ok(Layer::Process),
            other => Err(format!("unknown layer `{other}`")),
        }
    }
}

/// How a probe gets attached to a service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttachMode {
    /// Service and probe deployed together as one functional block.
    CoDeploy,
    /// New instrumented instance, load migrated, old instance retired.
    BlueGreenAttach,
    /// Probe started inside the running guest.
    InGuestInject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub probe_kind: String,
    /// Metric ids, or families written as a prefix ending in `*`.
    pub provides: BTreeSet<String>,
    pub layers: BTreeSet<Layer>,
    pub modes: BTreeSet<AttachMode>,
    /// Minimum sampling interval in milliseconds.
    pub default_interval: u64,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl ProbeSpec {
    pub fn provides_metric(&self, metric: &str) -> bool {
        self.provides.iter().any(|p| match p.strip_suffix('*') {
            Some(prefix) => metric.starts_with(prefix),
            None => p == metric,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbeCatalog {
    specs: Vec<ProbeSpec>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("malformed catalog: {0}")]
    Parse(String),
    #[error("invalid probe spec `{kind}`: {reason}")]
    Invalid { kind: String, reason: String },
}

impl ProbeCatalog {
    pub fn new(specs: Vec<ProbeSpec>) -> Result<Self, CatalogError> {
        let mut seen = BTreeSet::new();
        for spec in &specs {
            let bad = |reason: &str| CatalogError::Invalid {
                kind: spec.probe_kind.clone(),
                reason: reason.to_string(),
            };
            if !seen.insert(spec.probe_kind.as_str()) {
                return Err(bad("duplicate probe_kind"));
            }
            if spec.provides.is_empty() {
                return Err(bad("provides is empty"));
            }
            if spec.layers.is_empty() {
                return Err(bad("layers is empty"));
            }
            if spec.modes.is_empty() {
                return Err(bad("modes is empty"));
            }
            if spec.default_interval == 0 {
                return Err(bad("default_interval must be positive"));
            }
        }
        Ok(ProbeCatalog { specs })
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let specs: Vec<ProbeSpec> =
            serde_json::from_str(text).map_err(|e| CatalogError::Parse(e.to_string()))?;
        Self::new(specs)
    }

    pub fn get(&self, kind: &str) -> Option<&ProbeSpec> {
        self.specs.iter().find(|s| s.probe_kind == kind)
    }

    pub fn specs(&self) -> &[ProbeSpec] {
        &self.specs
    }
}

/// Heartbeat, latency, throughput and resource probes.
pub fn default_catalog() -> ProbeCatalog {
    ProbeCatalog::from_json(DEFAULT_CATALOG).expect("built-in catalog is valid")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ServiceState {
    #[default]
    NotDeployed,
    Running,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: String,
    pub layer: Layer,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub state: ServiceState,
    #[serde(default)]
    pub instance_ids: Vec<String>,
}

impl ServiceDescriptor {
    pub fn new(service_id: impl Into<String>, layer: Layer) -> Self {
        let service_id = service_id.into();
        ServiceDescriptor {
            endpoint: format!("{service_id}:80"),
            service_id,
            layer,
            state: ServiceState::NotDeployed,
            instance_ids: Vec::new(),
        }
    }

    pub fn running(mut self) -> Self {
        self.state = ServiceState::Running;
        if self.instance_ids.is_empty() {
            self.instance_ids.push(format!("{}-i0", self.service_id));
        }
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbeStatus {
    #[default]
    Planned,
    Deploying,
    Active,
    Retiring,
    Removed,
}

/// One probe instance bound to one service, covering a set of metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeAssignment {
    pub assignment_id: String,
    pub probe_kind: String,
    pub metric_ids: BTreeSet<String>,
    pub service_id: String,
    pub layer: Layer,
    /// Attach modes the probe supports; the deployer picks one.
    pub modes: BTreeSet<AttachMode>,
    /// Sampling interval in milliseconds.
    pub interval: u64,
    #[serde(default)]
    pub status: ProbeStatus,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl ProbeAssignment {
    pub fn new<M>(probe_kind: &str, service_id: &str, layer: Layer, metrics: M) -> Self
    where
        M: IntoIterator,
        M::Item: Into<String>,
    {
        let metric_ids: BTreeSet<String> = metrics.into_iter().map(Into::into).collect();
        ProbeAssignment {
            assignment_id: assignment_id(probe_kind, service_id, &metric_ids),
            probe_kind: probe_kind.to_string(),
            metric_ids,
            service_id: service_id.to_string(),
            layer,
            modes: [
                AttachMode::CoDeploy,
                AttachMode::BlueGreenAttach,
                AttachMode::InGuestInject,
            ]
            .into(),
            interval: 1000,
            status: ProbeStatus::Planned,
            params: BTreeMap::new(),
        }
    }

    /// Identity used to decide whether two assignments are the same probe.
    pub fn key(&self) -> (&str, &str, &BTreeSet<String>) {
        (&self.probe_kind, &self.service_id, &self.metric_ids)
    }
}

fn assignment_id(probe_kind: &str, service_id: &str, metrics: &BTreeSet<String>) -> String {
    let list: Vec<&str> = metrics.iter().map(String::as_str).collect();
    format!("{probe_kind}@{service_id}[{}]", list.join(","))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("no probe provides `{metric}` on service `{service}` at layer {layer}")]
    NoProbeForMetric {
        metric: String,
        service: String,
        layer: Layer,
    },
    #[error("metric `{0}` is not defined in the model")]
    UnknownMetric(String),
}

/// Picks probes covering every metric on every service.
///
/// Per service, probes are chosen greedily: the spec covering the most
/// still-uncovered metrics wins, ties go to the smallest `probe_kind`. Each
/// chosen probe yields one assignment holding all the metrics it covers.
pub fn resolve_probes<'a, S>(
    metrics: &BTreeSet<String>,
    services: S,
    catalog: &ProbeCatalog,
    model: &MonitoringModel,
) -> Result<Vec<ProbeAssignment>, ResolveError>
where
    S: IntoIterator<Item = &'a ServiceDescriptor>,
{
    if let Some(m) = metrics.iter().find(|m| model.metric(m).is_none()) {
        return Err(ResolveError::UnknownMetric(m.clone()));
    }
    let mut out = Vec::new();
    for service in services {
        let candidates: Vec<&ProbeSpec> = catalog
            .specs()
            .iter()
            .filter(|s| s.layers.contains(&service.layer))
            .collect();
        if let Some(m) = metrics
            .iter()
            .find(|m| !candidates.iter().any(|s| s.provides_metric(m)))
        {
            return Err(ResolveError::NoProbeForMetric {
                metric: m.clone(),
                service: service.service_id.clone(),
                layer: service.layer,
            });
        }

        let mut remaining = metrics.clone();
        while !remaining.is_empty() {
            let (spec, covered) = candidates
                .iter()
                .map(|s| {
                    let covered: BTreeSet<String> = remaining
                        .iter()
                        .filter(|m| s.provides_metric(m))
                        .cloned()
                        .collect();
                    (*s, covered)
                })
                .max_by(|(a, ca), (b, cb)| {
                    ca.len()
                        .cmp(&cb.len())
                        .then_with(|| b.probe_kind.cmp(&a.probe_kind))
                })
                .expect("every metric has a provider");
            remaining.retain(|m| !covered.contains(m));

            let interval = covered
                .iter()
                .filter_map(|m| model.metric(m))
                .map(|d| d.window_ms() / 6)
                .min()
                .unwrap_or(spec.default_interval)
                .max(spec.default_interval);
            out.push(ProbeAssignment {
                assignment_id: assignment_id(&spec.probe_kind, &service.service_id, &covered),
                probe_kind: spec.probe_kind.clone(),
                metric_ids: covered,
                service_id: service.service_id.clone(),
                layer: service.layer,
                modes: spec.modes.clone(),
                interval,
                status: ProbeStatus::Planned,
                params: spec.params.clone(),
            });
        }
    }
    out.sort_by(|a, b| a.assignment_id.cmp(&b.assignment_id));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum PlanAction {
    DeployProbe {
        assignment: ProbeAssignment,
    },
    UndeployProbe {
        assignment_id: String,
        service_id: String,
    },
    SpawnInstance {
        service_id: String,
        with: Vec<String>,
    },
    MigrateLoad {
        service_id: String,
        from: String,
        to: String,
    },
    RetireInstance {
        service_id: String,
        instance: String,
    },
}

impl PlanAction {
    pub fn service_id(&self) -> &str {
        match self {
            PlanAction::DeployProbe { assignment } => &assignment.service_id,
            PlanAction::UndeployProbe { service_id, .. }
            | PlanAction::SpawnInstance { service_id, .. }
            | PlanAction::MigrateLoad { service_id, .. }
            | PlanAction::RetireInstance { service_id, .. } => service_id,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub actions: Vec<PlanAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("action references unknown service `{0}`")]
    UnknownService(String),
    #[error("assignment `{0}` is both deployed and undeployed")]
    DeployUndeployOverlap(String),
}

impl DeploymentPlan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn deploys(&self) -> impl Iterator<Item = &ProbeAssignment> {
        self.actions.iter().filter_map(|a| match a {
            PlanAction::DeployProbe { assignment } => Some(assignment),
            _ => None,
        })
    }

    pub fn undeploys(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().filter_map(|a| match a {
            PlanAction::UndeployProbe { assignment_id, .. } => Some(assignment_id.as_str()),
            _ => None,
        })
    }

    pub fn validate(&self, services: &BTreeSet<String>) -> Result<(), PlanError> {
        if let Some(a) = self
            .actions
            .iter()
            .find(|a| !services.contains(a.service_id()))
        {
            return Err(PlanError::UnknownService(a.service_id().to_string()));
        }
        let undeployed: BTreeSet<&str> = self.undeploys().collect();
        if let Some(a) = self
            .deploys()
            .find(|a| undeployed.contains(a.assignment_id.as_str()))
        {
            return Err(PlanError::DeployUndeployOverlap(a.assignment_id.clone()));
        }
        Ok(())
    }

    /// The assignment set that results from applying the plan to `current`,
    /// ignoring instance-level actions.
    pub fn apply_to(&self, current: &[ProbeAssignment]) -> Vec<ProbeAssignment> {
        let mut set: BTreeMap<String, ProbeAssignment> = current
            .iter()
            .map(|a| (a.assignment_id.clone(), a.clone()))
            .collect();
        for action in &self.actions {
            match action {
                PlanAction::DeployProbe { assignment } => {
                    set.insert(assignment.assignment_id.clone(), assignment.clone());
                }
                PlanAction::UndeployProbe { assignment_id, .. } => {
                    set.remove(assignment_id);
                }
                _ => {}
            }
        }
        set.into_values().collect()
    }
}

/// Deploys `desired ∖ current`, undeploys `current ∖ desired`, and leaves
/// assignments with the same probe kind, service and metric set alone.
/// All deploys come before all undeploys.
pub fn plan_diff(current: &[ProbeAssignment], desired: &[ProbeAssignment]) -> DeploymentPlan {
    let current_keys: BTreeSet<_> = current.iter().map(ProbeAssignment::key).collect();
    let desired_keys: BTreeSet<_> = desired.iter().map(ProbeAssignment::key).collect();

    let mut deploy: Vec<&ProbeAssignment> = desired
        .iter()
        .filter(|a| !current_keys.contains(&a.key()))
        .collect();
    let mut undeploy: Vec<&ProbeAssignment> = current
        .iter()
        .filter(|a| !desired_keys.contains(&a.key()))
        .collect();
    deploy
        .sort_by(|a, b| (&a.service_id, &a.assignment_id).cmp(&(&b.service_id, &b.assignment_id)));
    deploy.dedup_by(|a, b| a.assignment_id == b.assignment_id);
    undeploy
        .sort_by(|a, b| (&a.service_id, &a.assignment_id).cmp(&(&b.service_id, &b.assignment_id)));
    undeploy.dedup_by(|a, b| a.assignment_id == b.assignment_id);

    let mut actions: Vec<PlanAction> = deploy
        .into_iter()
        .map(|a| {
            let mut assignment = a.clone();
            assignment.status = ProbeStatus::Planned;
            PlanAction::DeployProbe { assignment }
        })
        .collect();
    actions.extend(undeploy.into_iter().map(|a| PlanAction::UndeployProbe {
        assignment_id: a.assignment_id.clone(),
        service_id: a.service_id.clone(),
    }));
    DeploymentPlan { actions }
}
