//! The monitoring coordinator behind the HTTP layer.
//!
//! Holds the model, the actors and their selections, the simulated cloud and
//! the collector. Every selection change recomputes the probes needed by
//! all actors together and applies the difference.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use cloudhealth_core::aggregator::{snapshot, HealthSnapshot, NodeScore, Thresholds, Window};
use cloudhealth_core::collector::{
    Collector, CollectorConfig, KpiSample, LineError, SeriesWindow, HEARTBEAT_METRIC,
    HEARTBEAT_UNIT,
};
use cloudhealth_core::deployer::{Deployer, DeployerOptions, DeploymentReport};
use cloudhealth_core::model::{GoalSelection, ModelDocument, ModelPatch, MonitoringModel};
use cloudhealth_core::resolver::{
    plan_diff, resolve_probes, DeploymentPlan, ProbeAssignment, ProbeCatalog, ServiceDescriptor,
};
use cloudhealth_core::simenv::{start_scenario, FaultEvent, RequestLedger, ScenarioSpec, SimEnv};

use crate::error::ApiError;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub thresholds: Thresholds,
    pub deployer: DeployerOptions,
    pub collector: CollectorConfig,
    /// Actors, selections and the model are saved here after each change.
    pub state_file: Option<PathBuf>,
    /// Every acked sample is appended here as NDJSON.
    pub trace_file: Option<PathBuf>,
    /// Length of the trailing window used when a request names none.
    pub default_window_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            thresholds: Thresholds::default(),
            deployer: DeployerOptions::default(),
            collector: CollectorConfig::default(),
            state_file: None,
            trace_file: None,
            default_window_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActorProfile {
    pub display_name: String,
    pub role: String,
    /// Dashboard layout, stored as given.
    pub layout: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub actor_id: String,
    #[serde(default)]
    pub profile: ActorProfile,
    #[serde(default)]
    pub selection: Option<GoalSelection>,
}

impl Actor {
    fn new(actor_id: &str) -> Self {
        Actor {
            actor_id: actor_id.to_string(),
            profile: ActorProfile::default(),
            selection: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRequest {
    #[serde(default)]
    pub node_ids: BTreeSet<String>,
    /// Services to watch; every known service when omitted.
    #[serde(default)]
    pub service_ids: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResponse {
    pub actor_id: String,
    pub selection: Option<GoalSelection>,
    pub metrics: BTreeSet<String>,
    pub plan: DeploymentPlan,
    pub report: DeploymentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeView {
    #[serde(flatten)]
    pub assignment: ProbeAssignment,
    pub activated_at: Option<u64>,
    /// Actors whose selection needs one of the probe's metrics.
    pub actors: Vec<String>,
    pub refcount: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KpiView {
    pub metric_id: String,
    pub service_id: String,
    pub ts: u64,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeDetail {
    pub node: NodeScore,
    pub children: Vec<NodeScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<LineError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceStatus {
    #[serde(flatten)]
    pub service: ServiceDescriptor,
    pub ledger: RequestLedger,
    pub in_flight: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimStatus {
    pub now: u64,
    pub services: Vec<ServiceStatus>,
    pub faults: Vec<FaultEvent>,
}

/// Pushed to event-stream subscribers.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ServiceEvent {
    SnapshotUpdated { now: u64 },
    PlanApplied(DeploymentReport),
    FaultDetected { service_id: String, ts: u64 },
}

impl ServiceEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ServiceEvent::SnapshotUpdated { .. } => "snapshot-updated",
            ServiceEvent::PlanApplied(_) => "plan-applied",
            ServiceEvent::FaultDetected { .. } => "fault-detected",
        }
    }
}

/// A window given by a request: explicit bounds or a trailing length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowSpec {
    Range { from: u64, to: u64 },
    Trailing(u64),
}

impl std::str::FromStr for WindowSpec {
    type Err = ApiError;

    /// `from,to` in milliseconds, or a single trailing length.
    fn from_str(s: &str) -> Result<Self, ApiError> {
        let bad =
            || ApiError::bad_request(format!("window must be `from,to` or `length`, got `{s}`"));
        match s.split_once(',') {
            Some((a, b)) => {
                let from = a.trim().parse().map_err(|_| bad())?;
                let to = b.trim().parse().map_err(|_| bad())?;
                Ok(WindowSpec::Range { from, to })
            }
            None => s
                .trim()
                .parse()
                .map(WindowSpec::Trailing)
                .map_err(|_| bad()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PersistedState {
    model: ModelDocument,
    actors: Vec<Actor>,
}

struct Inner {
    model: MonitoringModel,
    catalog: ProbeCatalog,
    env: SimEnv,
    deployer: Deployer,
    actors: BTreeMap<String, Actor>,
}

/// Marks an actor as having a selection update in progress.
pub struct UpdateGuard<'a> {
    pending: &'a Mutex<BTreeSet<String>>,
    actor: String,
}

impl Drop for UpdateGuard<'_> {
    fn drop(&mut self) {
        self.pending.lock().remove(&self.actor);
    }
}

pub struct MonitoringService {
    inner: Mutex<Inner>,
    collector: Arc<Collector>,
    events: broadcast::Sender<ServiceEvent>,
    pending: Mutex<BTreeSet<String>>,
    config: ServiceConfig,
}

impl std::fmt::Debug for MonitoringService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MonitoringService")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl MonitoringService {
    /// Starts the service on a fresh simulation of `scenario`. A readable
    /// state file takes precedence over `model` and restores the actors.
    pub fn new(
        model: MonitoringModel,
        catalog: ProbeCatalog,
        scenario: &ScenarioSpec,
        config: ServiceConfig,
    ) -> Result<Self, ApiError> {
        let (model, actors) = match config.state_file.as_deref().map(load_state).transpose()? {
            Some(Some(state)) => {
                let model = MonitoringModel::from_document(state.model)?;
                let actors = state
                    .actors
                    .into_iter()
                    .map(|a| (a.actor_id.clone(), a))
                    .collect();
                (model, actors)
            }
            _ => (model, BTreeMap::new()),
        };
        let mut collector = Collector::for_model(&model, config.collector);
        if let Some(path) = &config.trace_file {
            collector = collector
                .with_trace_file(path)
                .map_err(|e| ApiError::internal(e.to_string()))?;
        }
        let collector = Arc::new(collector);
        let mut env = start_scenario(scenario)
            .map_err(|e| ApiError::unprocessable("scenario", e.to_string()))?;
        env.attach_collector(collector.clone());
        let (events, _) = broadcast::channel(256);
        let svc = MonitoringService {
            inner: Mutex::new(Inner {
                model,
                catalog,
                env,
                deployer: Deployer::new(config.deployer),
                actors,
            }),
            collector,
            events,
            pending: Mutex::new(BTreeSet::new()),
            config,
        };
        {
            let mut inner = svc.inner.lock();
            let model = inner.model.clone();
            for actor in inner.actors.values_mut() {
                if let Some(sel) = actor.selection.take() {
                    actor.selection = sel.bind(&model).ok();
                }
            }
            if inner.actors.values().any(|a| a.selection.is_some()) {
                let (_, report) = svc.reconcile(&mut inner)?;
                svc.publish(ServiceEvent::PlanApplied(report));
            }
        }
        Ok(svc)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn collector(&self) -> &Arc<Collector> {
        &self.collector
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ServiceEvent> {
        self.events.subscribe()
    }

    fn publish(&self, event: ServiceEvent) {
        // No subscribers is fine.
        let _ = self.events.send(event);
    }

    pub fn now(&self) -> u64 {
        self.inner.lock().env.now()
    }

    pub fn model(&self) -> MonitoringModel {
        self.inner.lock().model.clone()
    }

    pub fn catalog(&self) -> ProbeCatalog {
        self.inner.lock().catalog.clone()
    }

    pub fn actors(&self) -> Vec<Actor> {
        self.inner.lock().actors.values().cloned().collect()
    }

    pub fn actor(&self, actor_id: &str) -> Option<Actor> {
        self.inner.lock().actors.get(actor_id).cloned()
    }

    pub fn set_profile(&self, actor_id: &str, profile: ActorProfile) -> Result<Actor, ApiError> {
        let mut inner = self.inner.lock();
        let actor = inner
            .actors
            .entry(actor_id.to_string())
            .or_insert_with(|| Actor::new(actor_id));
        actor.profile = profile;
        let out = actor.clone();
        self.persist(&inner)?;
        Ok(out)
    }

    /// Claims the right to change `actor_id`'s selection. `None` while
    /// another update for the same actor is running.
    pub fn try_begin_update(&self, actor_id: &str) -> Option<UpdateGuard<'_>> {
        let mut pending = self.pending.lock();
        if !pending.insert(actor_id.to_string()) {
            return None;
        }
        Some(UpdateGuard {
            pending: &self.pending,
            actor: actor_id.to_string(),
        })
    }

    /// Replaces an actor's selection (creating the actor if needed) and
    /// redeploys probes for the union of all selections. An empty node set
    /// clears the selection.
    pub fn set_selection(
        &self,
        actor_id: &str,
        request: SelectionRequest,
    ) -> Result<SelectionResponse, ApiError> {
        let _guard = self.try_begin_update(actor_id).ok_or_else(|| {
            ApiError::conflict(format!(
                "a selection update for `{actor_id}` is in progress"
            ))
        })?;
        let mut inner = self.inner.lock();

        let known = inner.env.service_ids();
        let services = request.service_ids.clone().unwrap_or_else(|| known.clone());
        let unknown: Vec<&String> = services.difference(&known).collect();
        if !unknown.is_empty() {
            return Err(ApiError::unprocessable(
                "unknown_service",
                "selection names unknown services",
            )
            .with_details(unknown));
        }

        let (selection, metrics) = if request.node_ids.is_empty() {
            (None, BTreeSet::new())
        } else {
            let mut sel = GoalSelection::new(
                actor_id,
                request.node_ids.iter().cloned(),
                services.iter().cloned(),
            )
            .bind(&inner.model)?;
            sel.created_at = inner.env.now();
            let metrics = inner.model.subtree_metrics(&sel.node_ids)?;
            let descriptors: Vec<ServiceDescriptor> = services
                .iter()
                .filter_map(|s| inner.env.service(s))
                .collect();
            resolve_probes(&metrics, &descriptors, &inner.catalog, &inner.model)?;
            (Some(sel), metrics)
        };

        let previous = inner.actors.get(actor_id).and_then(|a| a.selection.clone());
        inner
            .actors
            .entry(actor_id.to_string())
            .or_insert_with(|| Actor::new(actor_id))
            .selection = selection.clone();
        let (plan, report) = match self.reconcile(&mut inner) {
            Ok(r) => r,
            Err(e) => {
                if let Some(a) = inner.actors.get_mut(actor_id) {
                    a.selection = previous;
                }
                return Err(e);
            }
        };
        self.persist(&inner)?;
        drop(inner);
        self.publish(ServiceEvent::PlanApplied(report.clone()));
        Ok(SelectionResponse {
            actor_id: actor_id.to_string(),
            selection,
            metrics,
            plan,
            report,
        })
    }

    /// Per service, the metrics each actor needs.
    fn needs(inner: &Inner) -> BTreeMap<String, BTreeMap<String, BTreeSet<String>>> {
        let mut out: BTreeMap<String, BTreeMap<String, BTreeSet<String>>> = BTreeMap::new();
        for actor in inner.actors.values() {
            let Some(sel) = &actor.selection else {
                continue;
            };
            let Ok(metrics) = inner.model.subtree_metrics(&sel.node_ids) else {
                continue;
            };
            for service in &sel.service_ids {
                let per_metric = out.entry(service.clone()).or_default();
                for m in &metrics {
                    per_metric
                        .entry(m.clone())
                        .or_default()
                        .insert(actor.actor_id.clone());
                }
            }
        }
        out
    }

    /// Resolution over the union of all selections. A deployed probe of the
    /// same kind that already covers a resolved assignment's metrics stands
    /// in for it, so narrowing the union never swaps out a probe that is
    /// still in use.
    fn desired(inner: &Inner) -> Result<Vec<ProbeAssignment>, ApiError> {
        let deployed = inner.env.deployed_assignments();
        let mut out: BTreeMap<String, ProbeAssignment> = BTreeMap::new();
        for (service, per_metric) in Self::needs(inner) {
            let Some(desc) = inner.env.service(&service) else {
                continue;
            };
            let metrics: BTreeSet<String> = per_metric.into_keys().collect();
            for a in resolve_probes(&metrics, [&desc], &inner.catalog, &inner.model)? {
                let keep = deployed.iter().find(|d| {
                    d.service_id == a.service_id
                        && d.probe_kind == a.probe_kind
                        && d.layer == a.layer
                        && a.metric_ids.is_subset(&d.metric_ids)
                });
                let a = keep.cloned().unwrap_or(a);
                out.insert(a.assignment_id.clone(), a);
            }
        }
        Ok(out.into_values().collect())
    }

    fn reconcile(&self, inner: &mut Inner) -> Result<(DeploymentPlan, DeploymentReport), ApiError> {
        let desired = Self::desired(inner)?;
        let plan = plan_diff(&inner.env.deployed_assignments(), &desired);
        let Inner { deployer, env, .. } = inner;
        let report = deployer.apply_plan(&plan, env);
        tracing::info!(
            plan = %report.plan_id,
            actions = report.outcomes.len(),
            "plan applied at t={}ms",
            report.finished
        );
        Ok((plan, report))
    }

    /// The probes that should be active.
    pub fn desired_assignments(&self) -> Result<Vec<ProbeAssignment>, ApiError> {
        Self::desired(&self.inner.lock())
    }

    pub fn probes(&self) -> Vec<ProbeView> {
        let inner = self.inner.lock();
        let needs = Self::needs(&inner);
        inner
            .env
            .active_assignments()
            .into_iter()
            .map(|a| {
                let actors: BTreeSet<String> = needs
                    .get(&a.service_id)
                    .map(|per| {
                        a.metric_ids
                            .iter()
                            .filter_map(|m| per.get(m))
                            .flatten()
                            .cloned()
                            .collect()
                    })
                    .unwrap_or_default();
                ProbeView {
                    activated_at: inner.env.probe_activated_at(&a.assignment_id),
                    refcount: actors.len(),
                    actors: actors.into_iter().collect(),
                    assignment: a,
                }
            })
            .collect()
    }

    fn resolve_window(&self, now: u64, spec: Option<WindowSpec>) -> Result<Window, ApiError> {
        let end = now + 1;
        let w = match spec {
            Some(WindowSpec::Range { from, to }) => Window::new(from, to),
            Some(WindowSpec::Trailing(len)) => Window::new(end.saturating_sub(len), end),
            None => Window::new(end.saturating_sub(self.config.default_window_ms), end),
        };
        if w.from >= w.to {
            return Err(ApiError::bad_request(format!(
                "empty window [{}, {})",
                w.from, w.to
            )));
        }
        Ok(w)
    }

    /// Health of an actor's selection over a window.
    pub fn health(
        &self,
        actor_id: &str,
        window: Option<WindowSpec>,
    ) -> Result<HealthSnapshot, ApiError> {
        let inner = self.inner.lock();
        let actor = inner
            .actors
            .get(actor_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown actor `{actor_id}`")))?;
        let sel = actor
            .selection
            .as_ref()
            .ok_or_else(|| ApiError::not_found(format!("actor `{actor_id}` has no selection")))?;
        let window = self.resolve_window(inner.env.now(), window)?;
        Ok(snapshot(
            &inner.model,
            sel,
            window,
            &*self.collector,
            &self.config.thresholds,
        )?)
    }

    /// One node of an actor's snapshot with its children, for drill-down.
    pub fn node_health(
        &self,
        node_id: &str,
        actor_id: &str,
        window: Option<WindowSpec>,
    ) -> Result<NodeDetail, ApiError> {
        let snap = self.health(actor_id, window)?;
        let (node, children) = snap.expand(node_id).ok_or_else(|| {
            ApiError::not_found(format!(
                "`{node_id}` is not in the selection of `{actor_id}`"
            ))
        })?;
        Ok(NodeDetail {
            node: node.clone(),
            children: children.into_iter().cloned().collect(),
        })
    }

    /// Latest value of every stored series.
    pub fn kpis(&self) -> Vec<KpiView> {
        let model = self.model();
        self.collector
            .series_keys()
            .into_iter()
            .filter_map(|(metric_id, service_id)| {
                let p = self.collector.latest(&metric_id, &service_id)?;
                let unit = if metric_id == HEARTBEAT_METRIC {
                    HEARTBEAT_UNIT.to_string()
                } else {
                    model
                        .metric(&metric_id)
                        .map(|d| d.unit.clone())
                        .unwrap_or_default()
                };
                Some(KpiView {
                    metric_id,
                    service_id,
                    ts: p.ts,
                    value: p.value,
                    unit,
                })
            })
            .collect()
    }

    /// Stored samples of one series. Without bounds the default trailing
    /// window is used.
    pub fn series(
        &self,
        metric_id: &str,
        service_id: &str,
        from: Option<u64>,
        to: Option<u64>,
    ) -> Result<SeriesWindow, ApiError> {
        if !self.collector.knows_metric(metric_id) {
            return Err(ApiError::not_found(format!("unknown metric `{metric_id}`")));
        }
        let default = self.resolve_window(self.now(), None)?;
        let (from, to) = (from.unwrap_or(default.from), to.unwrap_or(default.to));
        self.collector
            .query(metric_id, service_id, from, to)
            .map_err(|e| ApiError::bad_request(e.to_string()))
    }

    /// Allows samples from an externally run probe.
    pub fn register_probe(&self, probe_id: &str) {
        self.collector.register_probe(probe_id);
    }

    /// Accepts NDJSON samples from registered probes.
    pub fn ingest(&self, body: &str) -> IngestReport {
        let lines = body.lines().filter(|l| !l.trim().is_empty()).count();
        let rejected = self.collector.ingest_ndjson(body);
        IngestReport {
            accepted: lines - rejected.len(),
            rejected,
        }
    }

    /// Applies a model patch. Selections are carried over to the new
    /// version and probes are re-resolved.
    pub fn extend_model(&self, patch: &ModelPatch) -> Result<ModelDocument, ApiError> {
        let mut inner = self.inner.lock();
        // Everything under a selected node is in use by that selection.
        let referenced: BTreeSet<String> = inner
            .actors
            .values()
            .filter_map(|a| a.selection.as_ref())
            .flat_map(|s| s.node_ids.iter())
            .flat_map(|id| inner.model.subtree(id))
            .map(str::to_string)
            .collect();
        let next = inner.model.extend(patch, &referenced)?;
        let old = std::mem::replace(&mut inner.model, next);
        let model = inner.model.clone();
        for actor in inner.actors.values_mut() {
            if let Some(sel) = actor.selection.take() {
                actor.selection = Some(sel.bind(&model)?);
            }
        }
        self.collector.set_metrics(&model);
        let (_, report) = match self.reconcile(&mut inner) {
            Ok(r) => r,
            Err(e) => {
                inner.model = old.clone();
                for actor in inner.actors.values_mut() {
                    if let Some(sel) = actor.selection.as_mut() {
                        sel.model_version = old.version();
                    }
                }
                self.collector.set_metrics(&old);
                return Err(e);
            }
        };
        self.persist(&inner)?;
        drop(inner);
        if !report.outcomes.is_empty() {
            self.publish(ServiceEvent::PlanApplied(report));
        }
        Ok(model.to_document())
    }

    /// Advances the simulation and notifies subscribers.
    pub fn tick(&self, dt_ms: u64) -> Vec<KpiSample> {
        let (now, samples) = {
            let mut inner = self.inner.lock();
            let samples = inner.env.advance(dt_ms);
            (inner.env.now(), samples)
        };
        for s in samples
            .iter()
            .filter(|s| s.metric_id == "failure_count" && s.value > 0.0)
        {
            self.publish(ServiceEvent::FaultDetected {
                service_id: s.service_id.clone(),
                ts: s.ts,
            });
        }
        self.publish(ServiceEvent::SnapshotUpdated { now });
        samples
    }

    pub fn inject_fault(&self, fault: FaultEvent) -> Result<(), ApiError> {
        self.inner
            .lock()
            .env
            .inject_fault(fault)
            .map_err(|e| ApiError::unprocessable("fault", e.to_string()))
    }

    pub fn sim_status(&self) -> SimStatus {
        let inner = self.inner.lock();
        let env = &inner.env;
        SimStatus {
            now: env.now(),
            services: env
                .services()
                .into_iter()
                .map(|s| ServiceStatus {
                    ledger: env.ledger(&s.service_id).unwrap_or_default(),
                    in_flight: env.in_flight(&s.service_id),
                    service: s,
                })
                .collect(),
            faults: env.faults().to_vec(),
        }
    }

    fn persist(&self, inner: &Inner) -> Result<(), ApiError> {
        let Some(path) = &self.config.state_file else {
            return Ok(());
        };
        let state = PersistedState {
            model: inner.model.to_document(),
            actors: inner.actors.values().cloned().collect(),
        };
        write_atomic(
            path,
            &serde_json::to_vec_pretty(&state).expect("state serializes"),
        )
        .map_err(|e| ApiError::internal(format!("writing {}: {e}", path.display())))
    }
}

fn load_state(path: &Path) -> Result<Option<PersistedState>, ApiError> {
    match std::fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| ApiError::internal(format!("corrupt state file {}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(ApiError::internal(format!(
            "reading {}: {e}",
            path.display()
        ))),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
