//! Deterministic discrete-event simulation of a small cloud.
//!
//! Services sit behind a round-robin load balancer and receive requests from
//! a piecewise-constant workload schedule. Probes attached to services sample
//! on fixed intervals and emit [`KpiSample`]s. Faults (outages, latency
//! spikes, throughput drops) are scheduled up front or injected later.
//!
//! Time is a virtual millisecond clock that only moves in [`SimEnv::advance`].
//! Events falling on the same millisecond are processed in a fixed order:
//! workload changes, request completions, instance readiness, arrivals, then
//! probe ticks by probe id. Given the same scenario and the same sequence of
//! calls, every emitted sample is bit-identical.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::{Collector, KpiSample, HEARTBEAT_METRIC, HEARTBEAT_UNIT};
use crate::resolver::{ProbeAssignment, ProbeStatus, ServiceDescriptor, ServiceState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    /// Milliseconds.
    pub base_latency: f64,
    /// Half-width of the uniform jitter, milliseconds.
    #[serde(default)]
    pub jitter: f64,
    /// Requests per second an instance set can accept.
    pub max_throughput: f64,
    /// Percent.
    #[serde(default)]
    pub cpu_base: f64,
    /// Percent.
    #[serde(default)]
    pub mem_base: f64,
    /// Percent per req/s of offered load.
    #[serde(default)]
    pub cpu_per_req: f64,
    /// Half-width of uniform noise added to resource readings, percent.
    #[serde(default)]
    pub noise: f64,
}

impl BehaviorProfile {
    fn check(&self) -> Result<(), String> {
        let fields = [
            ("base_latency", self.base_latency),
            ("jitter", self.jitter),
            ("max_throughput", self.max_throughput),
            ("cpu_base", self.cpu_base),
            ("mem_base", self.mem_base),
            ("cpu_per_req", self.cpu_per_req),
            ("noise", self.noise),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(format!("{name} must be a non-negative number"));
        }
        if self.max_throughput <= 0.0 {
            return Err("max_throughput must be positive".into());
        }
        Ok(())
    }
}

impl Default for BehaviorProfile {
    fn default() -> Self {
        BehaviorProfile {
            base_latency: 40.0,
            jitter: 0.0,
            max_throughput: 100.0,
            cpu_base: 5.0,
            mem_base: 30.0,
            cpu_per_req: 0.5,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    /// Service refuses every request.
    Outage,
    /// Latency multiplied by `magnitude`.
    LatencySpike,
    /// Capacity reduced by the fraction `magnitude`.
    ThroughputDrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub service_id: String,
    pub kind: FaultKind,
    /// Milliseconds.
    pub start: u64,
    /// Milliseconds.
    pub duration: u64,
    #[serde(default)]
    pub magnitude: f64,
}

impl FaultEvent {
    pub fn end(&self) -> u64 {
        self.start + self.duration
    }

    fn covers(&self, t: u64) -> bool {
        self.start <= t && t < self.end()
    }

    fn overlaps(&self, other: &FaultEvent) -> bool {
        self.service_id == other.service_id && self.start < other.end() && other.start < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadStep {
    /// Milliseconds.
    pub from: u64,
    pub rps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub service_id: String,
    pub schedule: Vec<LoadStep>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub service: ServiceDescriptor,
    #[serde(default)]
    pub profile: BehaviorProfile,
    /// Whether probes may be started inside the running guest.
    #[serde(default = "yes")]
    pub guest_access: bool,
    /// Number of upcoming instance spawns that fail.
    #[serde(default)]
    pub spawn_failures: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvLimits {
    /// Cap on live instances across the environment.
    pub max_instances: Option<usize>,
    /// Boot time of a new instance, milliseconds.
    pub spawn_delay: u64,
    /// Longest wait for an instance to drain before it is retired anyway.
    pub drain_timeout: u64,
}

impl Default for EnvLimits {
    fn default() -> Self {
        EnvLimits {
            max_instances: None,
            spawn_delay: 1000,
            drain_timeout: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    #[serde(default)]
    pub services: Vec<ServiceEntry>,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default)]
    pub workload: Vec<Workload>,
    /// Milliseconds.
    #[serde(default)]
    pub duration: u64,
    #[serde(default)]
    pub limits: EnvLimits,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))
    }

    fn check(&self) -> Result<(), String> {
        let mut ids = BTreeSet::new();
        for entry in &self.services {
            let id = &entry.service.service_id;
            if !ids.insert(id.as_str()) {
                return Err(format!("duplicate service `{id}`"));
            }
            entry
                .profile
                .check()
                .map_err(|e| format!("service `{id}`: {e}"))?;
        }
        for (i, f) in self.faults.iter().enumerate() {
            if !ids.contains(f.service_id.as_str()) {
                return Err(format!(
                    "fault references unknown service `{}`",
                    f.service_id
                ));
            }
            if f.duration == 0 {
                return Err(format!("fault on `{}` has zero duration", f.service_id));
            }
            if self.faults[..i].iter().any(|g| g.overlaps(f)) {
                return Err(format!("overlapping faults on `{}`", f.service_id));
            }
        }
        let mut loaded = BTreeSet::new();
        for w in &self.workload {
            if !ids.contains(w.service_id.as_str()) {
                return Err(format!(
                    "workload references unknown service `{}`",
                    w.service_id
                ));
            }
            if !loaded.insert(w.service_id.as_str()) {
                return Err(format!("two workloads for `{}`", w.service_id));
            }
            if w.schedule.windows(2).any(|p| p[0].from >= p[1].from) {
                return Err(format!(
                    "workload schedule of `{}` is not increasing",
                    w.service_id
                ));
            }
            if w.schedule
                .iter()
                .any(|s| !(s.rps.is_finite() && s.rps >= 0.0))
            {
                return Err(format!(
                    "workload of `{}` has an invalid rate",
                    w.service_id
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("event starts at {start}, before the current time {now}")]
    PastEvent { start: u64, now: u64 },
    #[error("fault overlaps an existing fault on `{0}`")]
    Overlap(String),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("service `{0}` is not running")]
    NotRunning(String),
    #[error("instance capacity exhausted ({0} live)")]
    Capacity(usize),
    #[error("spawning an instance of `{0}` failed")]
    SpawnFailed(String),
    #[error("no guest access to `{0}`")]
    AccessDenied(String),
    #[error("probe `{0}` is already deployed")]
    ProbeExists(String),
}

/// Per-service request accounting. At any time
/// `sent = served + refused_* + dropped + in-flight`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLedger {
    pub sent: u64,
    pub served: u64,
    pub refused_outage: u64,
    pub refused_overload: u64,
    pub refused_unavailable: u64,
    pub dropped: u64,
}

impl RequestLedger {
    pub fn refused(&self) -> u64 {
        self.refused_outage + self.refused_overload + self.refused_unavailable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceState {
    Booting {
        ready_at: u64,
    },
    /// Booted, not yet receiving load.
    Standby,
    Serving,
    Draining,
    Retired,
}

#[derive(Debug, Clone)]
struct Instance {
    id: String,
    state: InstanceState,
    serve_on_ready: bool,
    in_flight: BinaryHeap<Reverse<u64>>,
}

impl Instance {
    fn live(&self) -> bool {
        self.state != InstanceState::Retired
    }
}

#[derive(Debug, Clone)]
struct SimService {
    descriptor: ServiceDescriptor,
    profile: BehaviorProfile,
    guest_access: bool,
    spawn_failures: u32,
    instances: Vec<Instance>,
    schedule: Vec<LoadStep>,
    next_step: usize,
    rate: f64,
    next_arrival: Option<f64>,
    rr: usize,
    bucket: (u64, u64),
    ledger: RequestLedger,
}

impl SimService {
    fn serving(&self) -> impl Iterator<Item = &Instance> {
        self.instances
            .iter()
            .filter(|i| i.state == InstanceState::Serving)
    }

    fn has_serving(&self) -> bool {
        self.serving().next().is_some()
    }

    fn instance_mut(&mut self, id: &str) -> Result<&mut Instance, SimError> {
        self.instances
            .iter_mut()
            .find(|i| i.id == id)
            .ok_or_else(|| SimError::UnknownInstance(id.to_string()))
    }

    fn in_flight(&self) -> u64 {
        self.instances
            .iter()
            .map(|i| i.in_flight.len() as u64)
            .sum()
    }
}

#[derive(Debug, Clone)]
struct SimProbe {
    assignment: ProbeAssignment,
    instance: String,
    activated_at: Option<u64>,
    next_tick: u64,
    last_tick: u64,
    last_alive: Option<u64>,
    dead: bool,
    served_mark: u64,
    sent_mark: u64,
}

/// A running simulation.
pub struct SimEnv {
    now: u64,
    rng: ChaCha8Rng,
    services: BTreeMap<String, SimService>,
    faults: Vec<FaultEvent>,
    probes: BTreeMap<String, SimProbe>,
    limits: EnvLimits,
    duration: u64,
    instance_seq: u64,
    collector: Option<Arc<Collector>>,
    ingest_errors: u64,
}

impl std::fmt::Debug for SimEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimEnv")
            .field("now", &self.now)
            .field("services", &self.services.keys().collect::<Vec<_>>())
            .field("probes", &self.probes.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Unit each simulated measurement is reported in.
pub fn simulated_unit(metric_id: &str) -> Option<&'static str> {
    Some(match metric_id {
        "failure_count" => "count",
        "failure_duration" | "recovery_time" | "response_time" | "latency" => "ms",
        "throughput" | "workload_size" => "req/s",
        "cpu_utilization" | "memory_utilization" => "percent",
        HEARTBEAT_METRIC => HEARTBEAT_UNIT,
        _ => return None,
    })
}

/// A small three-service scenario with a few scheduled faults.
pub fn demo_scenario() -> ScenarioSpec {
    ScenarioSpec::from_json(include_str!("../data/demo_scenario.json"))
        .expect("built-in scenario parses")
}

/// Builds an environment at time 0 from a scenario.
pub fn start_scenario(spec: &ScenarioSpec) -> Result<SimEnv, SimError> {
    spec.check().map_err(SimError::InvalidScenario)?;
    let mut services = BTreeMap::new();
    for entry in &spec.services {
        let mut descriptor = entry.service.clone();
        if descriptor.state == ServiceState::Running && descriptor.instance_ids.is_empty() {
            descriptor
                .instance_ids
                .push(format!("{}-i0", descriptor.service_id));
        }
        let instances = match descriptor.state {
            ServiceState::Running => descriptor
                .instance_ids
                .iter()
                .map(|id| Instance {
                    id: id.clone(),
                    state: InstanceState::Serving,
                    serve_on_ready: true,
                    in_flight: BinaryHeap::new(),
                })
                .collect(),
            ServiceState::NotDeployed => Vec::new(),
        };
        let schedule = spec
            .workload
            .iter()
            .find(|w| w.service_id == descriptor.service_id)
            .map(|w| w.schedule.clone())
            .unwrap_or_default();
        services.insert(
            descriptor.service_id.clone(),
            SimService {
                descriptor,
                profile: entry.profile.clone(),
                guest_access: entry.guest_access,
                spawn_failures: entry.spawn_failures,
                instances,
                schedule,
                next_step: 0,
                rate: 0.0,
                next_arrival: None,
                rr: 0,
                bucket: (0, 0),
                ledger: RequestLedger::default(),
            },
        );
    }
    let mut faults = spec.faults.clone();
    faults.sort_by_key(|f| (f.start, f.service_id.clone()));
    Ok(SimEnv {
        now: 0,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        services,
        faults,
        probes: BTreeMap::new(),
        limits: spec.limits,
        duration: spec.duration,
        instance_seq: 0,
        collector: None,
        ingest_errors: 0,
    })
}

impl SimEnv {
    /// Forwards every emitted sample to `collector` and keeps its probe
    /// registry in sync with the active probes.
    pub fn attach_collector(&mut self, collector: Arc<Collector>) {
        for (id, p) in &self.probes {
            if p.activated_at.is_some() {
                collector.register_probe(id);
            }
        }
        self.collector = Some(collector);
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Scenario length in milliseconds (0 when open-ended).
    pub fn duration(&self) -> u64 {
        self.duration
    }

    pub fn limits(&self) -> EnvLimits {
        self.limits
    }

    /// Samples the attached collector refused so far.
    pub fn ingest_errors(&self) -> u64 {
        self.ingest_errors
    }

    pub fn service_ids(&self) -> BTreeSet<String> {
        self.services.keys().cloned().collect()
    }

    /// Current view of a service: running iff some instance serves load.
    pub fn service(&self, id: &str) -> Option<ServiceDescriptor> {
        let s = self.services.get(id)?;
        let mut d = s.descriptor.clone();
        d.instance_ids = s
            .instances
            .iter()
            .filter(|i| i.live())
            .map(|i| i.id.clone())
            .collect();
        d.state = if s.has_serving() {
            ServiceState::Running
        } else {
            ServiceState::NotDeployed
        };
        Some(d)
    }

    pub fn services(&self) -> Vec<ServiceDescriptor> {
        self.services
            .keys()
            .filter_map(|id| self.service(id))
            .collect()
    }

    pub fn instance_state(&self, service: &str, instance: &str) -> Option<InstanceState> {
        self.services
            .get(service)?
            .instances
            .iter()
            .find(|i| i.id == instance)
            .map(|i| i.state)
    }

    pub fn serving_instances(&self, service: &str) -> Vec<String> {
        self.services
            .get(service)
            .map(|s| s.serving().map(|i| i.id.clone()).collect())
            .unwrap_or_default()
    }

    pub fn ledger(&self, service: &str) -> Option<RequestLedger> {
        self.services.get(service).map(|s| s.ledger)
    }

    pub fn in_flight(&self, service: &str) -> u64 {
        self.services.get(service).map_or(0, SimService::in_flight)
    }

    pub fn instance_in_flight(&self, service: &str, instance: &str) -> usize {
        self.services
            .get(service)
            .and_then(|s| s.instances.iter().find(|i| i.id == instance))
            .map_or(0, |i| i.in_flight.len())
    }

    /// Completion time of the last request in flight on `instance`.
    pub fn drained_at(&self, service: &str, instance: &str) -> Option<u64> {
        self.services
            .get(service)?
            .instances
            .iter()
            .find(|i| i.id == instance)?
            .in_flight
            .iter()
            .map(|Reverse(t)| *t)
            .max()
    }

    pub fn offered_load(&self, service: &str) -> f64 {
        self.services.get(service).map_or(0.0, |s| s.rate)
    }

    /// Replaces the workload of `service` from now on with a constant rate.
    pub fn set_load(&mut self, service: &str, rps: f64) -> Result<(), SimError> {
        let now = self.now;
        let s = self.service_mut(service)?;
        s.schedule.truncate(s.next_step);
        s.schedule.push(LoadStep {
            from: now,
            rps: rps.max(0.0),
        });
        Ok(())
    }

    pub fn set_guest_access(&mut self, service: &str, allowed: bool) -> Result<(), SimError> {
        self.service_mut(service)?.guest_access = allowed;
        Ok(())
    }

    /// Makes the next `count` spawns of `service` fail.
    pub fn fail_spawns(&mut self, service: &str, count: u32) -> Result<(), SimError> {
        self.service_mut(service)?.spawn_failures = count;
        Ok(())
    }

    pub fn faults(&self) -> &[FaultEvent] {
        &self.faults
    }

    pub fn inject_fault(&mut self, event: FaultEvent) -> Result<(), SimError> {
        if !self.services.contains_key(&event.service_id) {
            return Err(SimError::UnknownService(event.service_id));
        }
        if event.start < self.now {
            return Err(SimError::PastEvent {
                start: event.start,
                now: self.now,
            });
        }
        if event.duration == 0 {
            return Err(SimError::InvalidScenario(
                "fault duration must be positive".into(),
            ));
        }
        if self.faults.iter().any(|f| f.overlaps(&event)) {
            return Err(SimError::Overlap(event.service_id));
        }
        let at = self
            .faults
            .partition_point(|f| (f.start, &f.service_id) <= (event.start, &event.service_id));
        self.faults.insert(at, event);
        Ok(())
    }

    fn active_fault(&self, service: &str, kind: FaultKind, t: u64) -> Option<&FaultEvent> {
        self.faults
            .iter()
            .find(|f| f.service_id == service && f.kind == kind && f.covers(t))
    }

    pub fn in_outage(&self, service: &str, t: u64) -> bool {
        self.active_fault(service, FaultKind::Outage, t).is_some()
    }

    fn latency_factor(&self, service: &str, t: u64) -> f64 {
        self.active_fault(service, FaultKind::LatencySpike, t)
            .map_or(1.0, |f| f.magnitude)
    }

    fn capacity(&self, service: &str, t: u64) -> f64 {
        let base = self.services[service].profile.max_throughput;
        match self.active_fault(service, FaultKind::ThroughputDrop, t) {
            Some(f) => base * (1.0 - f.magnitude.clamp(0.0, 1.0)),
            None => base,
        }
    }

    fn service_mut(&mut self, id: &str) -> Result<&mut SimService, SimError> {
        self.services
            .get_mut(id)
            .ok_or_else(|| SimError::UnknownService(id.to_string()))
    }

    // ----- probes -----------------------------------------------------------

    pub fn probe_status(&self, assignment_id: &str) -> ProbeStatus {
        match self.probes.get(assignment_id) {
            None => ProbeStatus::Removed,
            Some(p) if p.activated_at.is_some() => ProbeStatus::Active,
            Some(_) => ProbeStatus::Deploying,
        }
    }

    pub fn probe_activated_at(&self, assignment_id: &str) -> Option<u64> {
        self.probes.get(assignment_id).and_then(|p| p.activated_at)
    }

    pub fn probe_instance(&self, assignment_id: &str) -> Option<&str> {
        self.probes.get(assignment_id).map(|p| p.instance.as_str())
    }

    /// Active assignments, sorted by id, with status set.
    pub fn active_assignments(&self) -> Vec<ProbeAssignment> {
        self.probes
            .values()
            .filter(|p| p.activated_at.is_some())
            .map(|p| {
                let mut a = p.assignment.clone();
                a.status = ProbeStatus::Active;
                a
            })
            .collect()
    }

    /// Every probe the environment knows about (deploying or active).
    pub fn deployed_assignments(&self) -> Vec<ProbeAssignment> {
        self.probes.values().map(|p| p.assignment.clone()).collect()
    }

    fn add_probe(&mut self, assignment: ProbeAssignment, instance: &str, active: bool) {
        let now = self.now;
        if active {
            if let Some(c) = &self.collector {
                c.register_probe(&assignment.assignment_id);
            }
        }
        let (served, sent) = self
            .services
            .get(&assignment.service_id)
            .map_or((0, 0), |s| (s.ledger.served, s.ledger.sent));
        let id = assignment.assignment_id.clone();
        let interval = assignment.interval.max(1);
        self.probes.insert(
            id,
            SimProbe {
                assignment,
                instance: instance.to_string(),
                activated_at: active.then_some(now),
                next_tick: now + interval,
                last_tick: now,
                last_alive: None,
                dead: false,
                served_mark: served,
                sent_mark: sent,
            },
        );
    }

    /// Starts a probe inside the running guest of `assignment.service_id`.
    /// The probe is active immediately.
    pub fn inject_probe(&mut self, assignment: ProbeAssignment) -> Result<String, SimError> {
        let s = self
            .services
            .get(&assignment.service_id)
            .ok_or_else(|| SimError::UnknownService(assignment.service_id.clone()))?;
        if self.probes.contains_key(&assignment.assignment_id) {
            return Err(SimError::ProbeExists(assignment.assignment_id));
        }
        let instance = s
            .serving()
            .next()
            .map(|i| i.id.clone())
            .ok_or_else(|| SimError::NotRunning(assignment.service_id.clone()))?;
        if !s.guest_access {
            return Err(SimError::AccessDenied(assignment.service_id.clone()));
        }
        self.add_probe(assignment, &instance, true);
        Ok(instance)
    }

    /// Stops a probe. Returns false if it was not deployed.
    pub fn remove_probe(&mut self, assignment_id: &str) -> bool {
        let removed = self.probes.remove(assignment_id).is_some();
        if removed {
            if let Some(c) = &self.collector {
                c.unregister_probe(assignment_id);
            }
        }
        removed
    }

    // ----- instances --------------------------------------------------------

    fn live_instances(&self) -> usize {
        self.services
            .values()
            .flat_map(|s| s.instances.iter())
            .filter(|i| i.live())
            .count()
    }

    /// Boots a new instance carrying `probes`; they turn active once the
    /// instance is ready. With `serve_on_ready` the instance joins the load
    /// balancer when ready, otherwise it waits in standby for a migration.
    pub fn spawn_instance(
        &mut self,
        service: &str,
        probes: Vec<ProbeAssignment>,
        serve_on_ready: bool,
    ) -> Result<String, SimError> {
        let live = self.live_instances();
        if self.limits.max_instances.is_some_and(|cap| live >= cap) {
            return Err(SimError::Capacity(live));
        }
        if let Some(p) = probes
            .iter()
            .find(|p| self.probes.contains_key(&p.assignment_id))
        {
            return Err(SimError::ProbeExists(p.assignment_id.clone()));
        }
        self.instance_seq += 1;
        let ready_at = self.now + self.limits.spawn_delay;
        let seq = self.instance_seq;
        let s = self.service_mut(service)?;
        if s.spawn_failures > 0 {
            s.spawn_failures -= 1;
            return Err(SimError::SpawnFailed(service.to_string()));
        }
        let id = format!("{service}-i{seq}");
        s.instances.push(Instance {
            id: id.clone(),
            state: InstanceState::Booting { ready_at },
            serve_on_ready,
            in_flight: BinaryHeap::new(),
        });
        for p in probes {
            self.add_probe(p, &id, false);
        }
        if self.limits.spawn_delay == 0 {
            self.boot_ready(self.now);
        }
        Ok(id)
    }

    pub fn ready_at(&self, service: &str, instance: &str) -> Option<u64> {
        match self.instance_state(service, instance)? {
            InstanceState::Booting { ready_at } => Some(ready_at),
            _ => Some(self.now),
        }
    }

    /// Routes new requests to `to` instead of `from`; `from` drains.
    /// Probes bound to `from` move to `to` without restarting.
    pub fn migrate_load(&mut self, service: &str, from: &str, to: &str) -> Result<(), SimError> {
        let s = self.service_mut(service)?;
        match s.instance_mut(to)?.state {
            InstanceState::Standby | InstanceState::Serving => {}
            _ => return Err(SimError::NotRunning(to.to_string())),
        }
        s.instance_mut(from)?;
        s.instance_mut(to)?.state = InstanceState::Serving;
        let old = s.instance_mut(from)?;
        if old.state == InstanceState::Serving {
            old.state = InstanceState::Draining;
        }
        for p in self.probes.values_mut() {
            if p.assignment.service_id == service && p.instance == from {
                p.instance = to.to_string();
            }
        }
        Ok(())
    }

    /// Takes an instance out of service. In-flight requests are dropped and
    /// probes still bound to it are removed. Returns the dropped count.
    pub fn retire_instance(&mut self, service: &str, instance: &str) -> Result<u64, SimError> {
        let s = self.service_mut(service)?;
        let inst = s.instance_mut(instance)?;
        let dropped = inst.in_flight.len() as u64;
        inst.in_flight.clear();
        inst.state = InstanceState::Retired;
        s.ledger.dropped += dropped;
        let orphaned: Vec<String> = self
            .probes
            .iter()
            .filter(|(_, p)| p.assignment.service_id == service && p.instance == instance)
            .map(|(id, _)| id.clone())
            .collect();
        for id in orphaned {
            self.remove_probe(&id);
        }
        Ok(dropped)
    }

    // ----- clock ------------------------------------------------------------

    /// Moves the clock forward by `dt` ms, processing every event on the
    /// way. Returns the samples emitted, ordered by (ts, probe id).
    pub fn advance(&mut self, dt: u64) -> Vec<KpiSample> {
        let target = self.now + dt;
        let mut emitted = Vec::new();
        while let Some(t) = self.next_event_time().filter(|t| *t <= target) {
            self.now = t;
            self.process(t, &mut emitted);
        }
        self.now = target;
        emitted.sort_by(|a, b| (a.ts, &a.probe_id).cmp(&(b.ts, &b.probe_id)));
        if let Some(c) = &self.collector {
            for s in &emitted {
                if let Err(e) = c.ingest(s) {
                    self.ingest_errors += 1;
                    tracing::warn!(probe = %s.probe_id, metric = %s.metric_id, "sample rejected: {e}");
                }
            }
            c.flush();
        }
        emitted
    }

    pub fn advance_to(&mut self, t: u64) -> Vec<KpiSample> {
        self.advance(t.saturating_sub(self.now))
    }

    fn next_event_time(&self) -> Option<u64> {
        let mut next: Option<u64> = None;
        let mut consider = |t: u64| next = Some(next.map_or(t, |n| n.min(t)));
        for s in self.services.values() {
            if let Some(step) = s.schedule.get(s.next_step) {
                consider(step.from.max(self.now));
            }
            if let Some(a) = s.next_arrival {
                consider((a.ceil() as u64).max(self.now));
            }
            for i in &s.instances {
                if let Some(Reverse(t)) = i.in_flight.peek() {
                    consider(*t);
                }
                if let InstanceState::Booting { ready_at } = i.state {
                    consider(ready_at);
                }
            }
        }
        for p in self.probes.values() {
            if p.activated_at.is_some() {
                consider(p.next_tick);
            }
        }
        next
    }

    fn process(&mut self, t: u64, out: &mut Vec<KpiSample>) {
        // workload changes
        for s in self.services.values_mut() {
            while s.schedule.get(s.next_step).is_some_and(|st| st.from <= t) {
                s.rate = s.schedule[s.next_step].rps;
                s.next_step += 1;
                s.next_arrival = (s.rate > 0.0).then_some(t as f64);
            }
        }
        // completions
        for s in self.services.values_mut() {
            for inst in &mut s.instances {
                while inst.in_flight.peek().is_some_and(|Reverse(c)| *c <= t) {
                    inst.in_flight.pop();
                    s.ledger.served += 1;
                }
                if inst.state == InstanceState::Draining && inst.in_flight.is_empty() {
                    // stays draining until retired; nothing to do
                }
            }
        }
        self.boot_ready(t);
        // arrivals
        let ids: Vec<String> = self.services.keys().cloned().collect();
        for id in &ids {
            while let Some(a) = self.services[id]
                .next_arrival
                .filter(|a| a.ceil() as u64 <= t)
            {
                self.arrive(id, t);
                let s = self.services.get_mut(id).expect("service exists");
                s.next_arrival = (s.rate > 0.0).then(|| a + 1000.0 / s.rate);
            }
        }
        // probe ticks
        let due: Vec<String> = self
            .probes
            .iter()
            .filter(|(_, p)| p.activated_at.is_some() && p.next_tick <= t)
            .map(|(id, _)| id.clone())
            .collect();
        for id in due {
            self.tick_probe(&id, t, out);
        }
    }

    fn boot_ready(&mut self, t: u64) {
        let mut ready = Vec::new();
        for s in self.services.values_mut() {
            for inst in &mut s.instances {
                if let InstanceState::Booting { ready_at } = inst.state {
                    if ready_at <= t {
                        inst.state = if inst.serve_on_ready {
                            InstanceState::Serving
                        } else {
                            InstanceState::Standby
                        };
                        ready.push((s.descriptor.service_id.clone(), inst.id.clone()));
                    }
                }
            }
        }
        for (service, instance) in ready {
            let ids: Vec<String> = self
                .probes
                .iter()
                .filter(|(_, p)| {
                    p.activated_at.is_none()
                        && p.assignment.service_id == service
                        && p.instance == instance
                })
                .map(|(id, _)| id.clone())
                .collect();
            for id in ids {
                let (served, sent) = {
                    let s = &self.services[&service];
                    (s.ledger.served, s.ledger.sent)
                };
                let p = self.probes.get_mut(&id).expect("probe exists");
                p.activated_at = Some(t);
                p.next_tick = t + p.assignment.interval.max(1);
                p.last_tick = t;
                p.served_mark = served;
                p.sent_mark = sent;
                if let Some(c) = &self.collector {
                    c.register_probe(&id);
                }
            }
        }
    }

    fn sample_latency(&mut self, service: &str, t: u64) -> f64 {
        let (base, jitter) = {
            let p = &self.services[service].profile;
            (p.base_latency, p.jitter)
        };
        let noise = if jitter > 0.0 {
            self.rng.gen_range(-jitter..=jitter)
        } else {
            0.0
        };
        (base + noise).max(0.0) * self.latency_factor(service, t)
    }

    fn arrive(&mut self, service: &str, t: u64) {
        let outage = self.in_outage(service, t);
        let capacity = self.capacity(service, t);
        let latency = if outage {
            0.0
        } else {
            self.sample_latency(service, t)
        };
        let s = self.services.get_mut(service).expect("service exists");
        s.ledger.sent += 1;
        if outage {
            s.ledger.refused_outage += 1;
            return;
        }
        let serving: Vec<usize> = s
            .instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.state == InstanceState::Serving)
            .map(|(k, _)| k)
            .collect();
        if serving.is_empty() {
            s.ledger.refused_unavailable += 1;
            return;
        }
        let second = t / 1000;
        if s.bucket.0 != second {
            s.bucket = (second, 0);
        }
        if s.bucket.1 as f64 >= capacity {
            s.ledger.refused_overload += 1;
            return;
        }
        s.bucket.1 += 1;
        let pick = serving[s.rr % serving.len()];
        s.rr = s.rr.wrapping_add(1);
        let done = t + (latency.round() as u64).max(1);
        s.instances[pick].in_flight.push(Reverse(done));
    }

    fn tick_probe(&mut self, id: &str, t: u64, out: &mut Vec<KpiSample>) {
        let probe = self.probes[id].clone();
        let service = probe.assignment.service_id.clone();
        let Some(svc) = self.services.get(&service) else {
            return;
        };
        let up = svc.has_serving();
        let outage = self.in_outage(&service, t);
        let alive = up && !outage;
        let interval = probe.assignment.interval.max(1);
        let elapsed_s = (t - probe.last_tick).max(1) as f64 / 1000.0;
        let (served, sent, rate, cpu_base, cpu_per_req, mem_base, noise) = (
            svc.ledger.served,
            svc.ledger.sent,
            svc.rate,
            svc.profile.cpu_base,
            svc.profile.cpu_per_req,
            svc.profile.mem_base,
            svc.profile.noise,
        );
        let capacity = self.capacity(&service, t);

        let measured_latency = (alive
            && probe
                .assignment
                .metric_ids
                .iter()
                .any(|m| m == "latency" || m == "response_time"))
        .then(|| self.sample_latency(&service, t));
        let mut emit = |metric: &str, value: f64| {
            if let Some(unit) = simulated_unit(metric) {
                out.push(KpiSample {
                    probe_id: id.to_string(),
                    service_id: service.clone(),
                    metric_id: metric.to_string(),
                    ts: t,
                    value,
                    unit: unit.to_string(),
                });
            }
        };
        if probe.assignment.probe_kind == "heartbeat" {
            emit(HEARTBEAT_METRIC, if alive { 1.0 } else { 0.0 });
        }
        let draw = |rng: &mut ChaCha8Rng| {
            if noise > 0.0 {
                rng.gen_range(-noise..=noise)
            } else {
                0.0
            }
        };

        for metric in &probe.assignment.metric_ids {
            match metric.as_str() {
                "failure_count" => emit(metric, if !alive && !probe.dead { 1.0 } else { 0.0 }),
                "failure_duration" => emit(metric, if alive { 0.0 } else { interval as f64 }),
                "recovery_time" => {
                    if alive && probe.dead {
                        let since = probe
                            .last_alive
                            .unwrap_or_else(|| probe.last_tick.saturating_sub(interval));
                        emit(metric, (t - since) as f64);
                    }
                }
                "latency" => {
                    if let Some(l) = measured_latency {
                        emit(metric, l);
                    }
                }
                "response_time" => {
                    if let Some(l) = measured_latency {
                        emit(metric, l + 1000.0 / capacity.max(1e-9));
                    }
                }
                "throughput" => emit(metric, (served - probe.served_mark) as f64 / elapsed_s),
                "workload_size" => emit(metric, (sent - probe.sent_mark) as f64 / elapsed_s),
                "cpu_utilization" if up => {
                    let v = cpu_base + cpu_per_req * rate + draw(&mut self.rng);
                    emit(metric, v.clamp(0.0, 100.0));
                }
                "memory_utilization" if up => {
                    let v = mem_base + draw(&mut self.rng);
                    emit(metric, v.clamp(0.0, 100.0));
                }
                _ => {}
            }
        }

        let p = self.probes.get_mut(id).expect("probe exists");
        p.next_tick = t + interval;
        p.last_tick = t;
        p.served_mark = served;
        p.sent_mark = sent;
        if alive {
            p.last_alive = Some(t);
        }
        p.dead = !alive;
    }
}
