//! Executes deployment plans against a [`SimEnv`].
//!
//! Services that are not deployed yet get their probes in the same
//! functional block as the service itself. Running services get a
//! blue-green swap or an in-guest injection, whichever the probe supports.
//! Redeploying a running service from scratch is only done when explicitly
//! allowed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resolver::{
    AttachMode, DeploymentPlan, PlanAction, ProbeAssignment, ProbeStatus, ServiceDescriptor,
    ServiceState,
};
use crate::simenv::{InstanceState, SimEnv, SimError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeployError {
    #[error("no attach mode of `{probe}` fits service `{service}`")]
    NoViableMode { service: String, probe: String },
    #[error("service `{0}` is not running")]
    NotRunning(String),
    #[error(transparent)]
    Env(#[from] SimError),
}

/// A service together with the probes it ships with.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalBlock {
    pub service: ServiceDescriptor,
    pub probes: Vec<ProbeAssignment>,
}

impl FunctionalBlock {
    pub fn new(
        service: ServiceDescriptor,
        probes: Vec<ProbeAssignment>,
    ) -> Result<Self, DeployError> {
        if let Some(p) = probes
            .iter()
            .find(|p| !p.modes.contains(&AttachMode::CoDeploy))
        {
            return Err(DeployError::NoViableMode {
                service: service.service_id.clone(),
                probe: p.assignment_id.clone(),
            });
        }
        let probes = probes
            .into_iter()
            .map(|p| render_params(p, &service))
            .collect();
        Ok(FunctionalBlock { service, probes })
    }
}

/// Fills `{service_id}`, `{endpoint}` and `{interval}` placeholders in the
/// probe's parameters.
pub fn render_params(
    mut assignment: ProbeAssignment,
    service: &ServiceDescriptor,
) -> ProbeAssignment {
    let endpoint = service.endpoint.clone();
    let interval = assignment.interval.to_string();
    for value in assignment.params.values_mut() {
        *value = value
            .replace("{service_id}", &service.service_id)
            .replace("{endpoint}", &endpoint)
            .replace("{interval}", &interval);
    }
    assignment
}

/// Picks the attach mode for one probe on one service.
pub fn choose_strategy(
    service: &ServiceDescriptor,
    assignment: &ProbeAssignment,
) -> Result<AttachMode, DeployError> {
    let supports = |m| assignment.modes.contains(&m);
    let mode = match service.state {
        ServiceState::NotDeployed if supports(AttachMode::CoDeploy) => AttachMode::CoDeploy,
        ServiceState::Running if supports(AttachMode::BlueGreenAttach) => {
            AttachMode::BlueGreenAttach
        }
        ServiceState::Running if supports(AttachMode::InGuestInject) => AttachMode::InGuestInject,
        _ => {
            return Err(DeployError::NoViableMode {
                service: service.service_id.clone(),
                probe: assignment.assignment_id.clone(),
            })
        }
    };
    Ok(mode)
}

/// An instance-level step taken while attaching probes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub at: u64,
    pub action: PlanAction,
}

/// What one attach operation did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachRecord {
    pub mode: AttachMode,
    pub started: u64,
    pub finished: u64,
    pub steps: Vec<StepRecord>,
    /// Requests lost when an instance was retired before it drained.
    pub dropped: u64,
    pub forced_retirements: Vec<String>,
}

impl AttachRecord {
    fn new(mode: AttachMode, started: u64) -> Self {
        AttachRecord {
            mode,
            started,
            finished: started,
            steps: Vec::new(),
            dropped: 0,
            forced_retirements: Vec::new(),
        }
    }
}

/// Brings up a not-yet-deployed service with its probes in one block and
/// waits until it is ready.
pub fn co_deploy(block: FunctionalBlock, env: &mut SimEnv) -> Result<AttachRecord, DeployError> {
    let service_id = block.service.service_id.clone();
    let mut rec = AttachRecord::new(AttachMode::CoDeploy, env.now());
    let kinds = block.probes.iter().map(|p| p.probe_kind.clone()).collect();
    let instance = env.spawn_instance(&service_id, block.probes, true)?;
    rec.steps.push(StepRecord {
        at: env.now(),
        action: PlanAction::SpawnInstance {
            service_id: service_id.clone(),
            with: kinds,
        },
    });
    wait_ready(env, &service_id, &instance);
    rec.finished = env.now();
    Ok(rec)
}

fn wait_ready(env: &mut SimEnv, service: &str, instance: &str) {
    if let Some(t) = env.ready_at(service, instance) {
        env.advance_to(t);
    }
}

/// Attaches probes to a running service by booting a replacement instance
/// that carries them, moving load over and retiring the old instances once
/// they drain. Old instances still busy after the drain timeout are retired
/// anyway and their in-flight requests are counted as dropped.
pub fn attach_blue_green(
    service_id: &str,
    probes: Vec<ProbeAssignment>,
    env: &mut SimEnv,
) -> Result<AttachRecord, DeployError> {
    let service = env
        .service(service_id)
        .ok_or_else(|| SimError::UnknownService(service_id.into()))?;
    let old = env.serving_instances(service_id);
    if old.is_empty() {
        return Err(DeployError::NotRunning(service_id.to_string()));
    }
    let mut rec = AttachRecord::new(AttachMode::BlueGreenAttach, env.now());
    let probes: Vec<ProbeAssignment> = probes
        .into_iter()
        .map(|p| render_params(p, &service))
        .collect();
    let kinds = probes.iter().map(|p| p.probe_kind.clone()).collect();
    let green = env.spawn_instance(service_id, probes, false)?;
    rec.steps.push(StepRecord {
        at: env.now(),
        action: PlanAction::SpawnInstance {
            service_id: service_id.to_string(),
            with: kinds,
        },
    });
    wait_ready(env, service_id, &green);

    for blue in &old {
        env.migrate_load(service_id, blue, &green)?;
        rec.steps.push(StepRecord {
            at: env.now(),
            action: PlanAction::MigrateLoad {
                service_id: service_id.to_string(),
                from: blue.clone(),
                to: green.clone(),
            },
        });
    }

    let deadline = env.now() + env.limits().drain_timeout;
    loop {
        let pending = old
            .iter()
            .filter_map(|b| env.drained_at(service_id, b))
            .max();
        match pending {
            None => break,
            Some(t) if t > deadline => {
                env.advance_to(deadline);
                break;
            }
            Some(t) => {
                env.advance_to(t);
            }
        }
    }
    for blue in &old {
        if env.instance_in_flight(service_id, blue) > 0 {
            rec.forced_retirements.push(blue.clone());
        }
        rec.dropped += env.retire_instance(service_id, blue)?;
        rec.steps.push(StepRecord {
            at: env.now(),
            action: PlanAction::RetireInstance {
                service_id: service_id.to_string(),
                instance: blue.clone(),
            },
        });
    }
    rec.finished = env.now();
    Ok(rec)
}

/// Starts a probe inside the running guest.
pub fn inject_in_guest(
    service_id: &str,
    probe: ProbeAssignment,
    env: &mut SimEnv,
) -> Result<AttachRecord, DeployError> {
    let service = env
        .service(service_id)
        .ok_or_else(|| SimError::UnknownService(service_id.into()))?;
    let rec = AttachRecord::new(AttachMode::InGuestInject, env.now());
    env.inject_probe(render_params(probe, &service))?;
    Ok(rec)
}

/// Tears a running service down and brings it back with the probes. Every
/// request in flight is dropped and requests are refused while it boots.
pub fn redeploy_stop_the_world(
    service_id: &str,
    probes: Vec<ProbeAssignment>,
    env: &mut SimEnv,
) -> Result<AttachRecord, DeployError> {
    let service = env
        .service(service_id)
        .ok_or_else(|| SimError::UnknownService(service_id.into()))?;
    let mut rec = AttachRecord::new(AttachMode::CoDeploy, env.now());
    for inst in &service.instance_ids {
        rec.dropped += env.retire_instance(service_id, inst)?;
        rec.steps.push(StepRecord {
            at: env.now(),
            action: PlanAction::RetireInstance {
                service_id: service_id.to_string(),
                instance: inst.clone(),
            },
        });
    }
    let block = FunctionalBlock {
        service: env.service(service_id).expect("known service"),
        probes,
    };
    let kinds = block.probes.iter().map(|p| p.probe_kind.clone()).collect();
    let probes = block
        .probes
        .into_iter()
        .map(|p| render_params(p, &block.service))
        .collect();
    let instance = env.spawn_instance(service_id, probes, true)?;
    rec.steps.push(StepRecord {
        at: env.now(),
        action: PlanAction::SpawnInstance {
            service_id: service_id.to_string(),
            with: kinds,
        },
    });
    wait_ready(env, service_id, &instance);
    rec.finished = env.now();
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionStatus {
    Done,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub action: PlanAction,
    pub status: ActionStatus,
    pub mode: Option<AttachMode>,
    pub started: u64,
    pub finished: u64,
    pub detail: String,
}

/// Time from the start of a plan until a metric that was not monitored
/// before is sampled by an active probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapRecord {
    pub metric_id: String,
    pub service_id: String,
    pub gap: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentReport {
    pub plan_id: String,
    pub started: u64,
    pub finished: u64,
    pub outcomes: Vec<ActionOutcome>,
    pub monitoring_gaps: Vec<GapRecord>,
    pub dropped_requests: u64,
    pub attachments: Vec<AttachRecord>,
}

impl DeploymentReport {
    pub fn all_done(&self) -> bool {
        self.outcomes
            .iter()
            .all(|o| o.status != ActionStatus::Failed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &ActionOutcome> {
        self.outcomes
            .iter()
            .filter(|o| o.status == ActionStatus::Failed)
    }

    pub fn max_gap(&self) -> Option<u64> {
        self.monitoring_gaps.iter().map(|g| g.gap).max()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployerOptions {
    /// Permit tearing down a running service when no live attach mode fits.
    pub allow_stop_the_world: bool,
}

#[derive(Debug, Default)]
pub struct Deployer {
    options: DeployerOptions,
    applied: u64,
}

impl Deployer {
    pub fn new(options: DeployerOptions) -> Self {
        Deployer {
            options,
            applied: 0,
        }
    }

    pub fn options(&self) -> DeployerOptions {
        self.options
    }

    /// Applies `plan` in order. Probe deployments for the same service are
    /// grouped so one blue-green swap or one functional block carries all of
    /// them. Every action gets exactly one outcome.
    pub fn apply_plan(&mut self, plan: &DeploymentPlan, env: &mut SimEnv) -> DeploymentReport {
        self.applied += 1;
        let plan_id = format!("plan-{}", self.applied);
        let started = env.now();
        let covered_before: BTreeSet<(String, String)> = env
            .active_assignments()
            .iter()
            .flat_map(|a| {
                a.metric_ids
                    .iter()
                    .map(|m| (m.clone(), a.service_id.clone()))
            })
            .collect();

        let mut outcomes: Vec<Option<ActionOutcome>> = vec![None; plan.actions.len()];
        let mut attachments = Vec::new();

        for i in 0..plan.actions.len() {
            if outcomes[i].is_some() {
                continue;
            }
            let action = &plan.actions[i];
            let t0 = env.now();
            let simple = |status, detail: String, env: &SimEnv| ActionOutcome {
                action: action.clone(),
                status,
                mode: None,
                started: t0,
                finished: env.now(),
                detail,
            };
            match action {
                PlanAction::DeployProbe { assignment } => {
                    let service = assignment.service_id.clone();
                    let group: Vec<usize> = (i..plan.actions.len())
                        .filter(|&j| outcomes[j].is_none())
                        .filter(|&j| matches!(&plan.actions[j], PlanAction::DeployProbe { assignment } if assignment.service_id == service))
                        .collect();
                    self.deploy_group(plan, &group, env, &mut outcomes, &mut attachments);
                }
                PlanAction::UndeployProbe { assignment_id, .. } => {
                    outcomes[i] = Some(if env.remove_probe(assignment_id) {
                        simple(ActionStatus::Done, "probe removed".into(), env)
                    } else {
                        simple(ActionStatus::Skipped, "probe not deployed".into(), env)
                    });
                }
                PlanAction::SpawnInstance { service_id, .. } => {
                    outcomes[i] = Some(match env.spawn_instance(service_id, Vec::new(), true) {
                        Ok(id) => {
                            wait_ready(env, service_id, &id);
                            simple(ActionStatus::Done, format!("instance {id} serving"), env)
                        }
                        Err(e) => simple(ActionStatus::Failed, e.to_string(), env),
                    });
                }
                PlanAction::MigrateLoad {
                    service_id,
                    from,
                    to,
                } => {
                    outcomes[i] = Some(match env.migrate_load(service_id, from, to) {
                        Ok(()) => simple(ActionStatus::Done, format!("load moved to {to}"), env),
                        Err(e) => simple(ActionStatus::Failed, e.to_string(), env),
                    });
                }
                PlanAction::RetireInstance {
                    service_id,
                    instance,
                } => {
                    let outcome = match env.instance_state(service_id, instance) {
                        Some(InstanceState::Retired) => {
                            simple(ActionStatus::Skipped, "already retired".into(), env)
                        }
                        _ => match env.retire_instance(service_id, instance) {
                            Ok(dropped) => simple(
                                ActionStatus::Done,
                                format!("{dropped} requests dropped"),
                                env,
                            ),
                            Err(e) => simple(ActionStatus::Failed, e.to_string(), env),
                        },
                    };
                    outcomes[i] = Some(outcome);
                }
            }
        }

        let mut gaps: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (action, outcome) in plan.actions.iter().zip(&outcomes) {
            let (PlanAction::DeployProbe { assignment }, Some(o)) = (action, outcome) else {
                continue;
            };
            if o.status != ActionStatus::Done {
                continue;
            }
            let Some(active) = env.probe_activated_at(&assignment.assignment_id) else {
                continue;
            };
            for m in &assignment.metric_ids {
                let key = (m.clone(), assignment.service_id.clone());
                if covered_before.contains(&key) {
                    continue;
                }
                let gap = active.saturating_sub(started);
                gaps.entry(key)
                    .and_modify(|g| *g = (*g).min(gap))
                    .or_insert(gap);
            }
        }

        let outcomes: Vec<ActionOutcome> = outcomes
            .into_iter()
            .map(|o| o.expect("every action has an outcome"))
            .collect();
        let dropped_requests = attachments.iter().map(|a: &AttachRecord| a.dropped).sum();
        for o in outcomes.iter().filter(|o| o.status == ActionStatus::Failed) {
            tracing::warn!(plan = %plan_id, "action failed: {}", o.detail);
        }
        DeploymentReport {
            plan_id,
            started,
            finished: env.now(),
            outcomes,
            monitoring_gaps: gaps
                .into_iter()
                .map(|((metric_id, service_id), gap)| GapRecord {
                    metric_id,
                    service_id,
                    gap,
                })
                .collect(),
            dropped_requests,
            attachments,
        }
    }

    fn deploy_group(
        &self,
        plan: &DeploymentPlan,
        group: &[usize],
        env: &mut SimEnv,
        outcomes: &mut [Option<ActionOutcome>],
        attachments: &mut Vec<AttachRecord>,
    ) {
        let assignment_of = |j: usize| match &plan.actions[j] {
            PlanAction::DeployProbe { assignment } => assignment.clone(),
            _ => unreachable!("group only holds probe deployments"),
        };
        let t0 = env.now();
        let outcome = |j: usize, status, mode, detail: String, finished| ActionOutcome {
            action: plan.actions[j].clone(),
            status,
            mode,
            started: t0,
            finished,
            detail,
        };

        let mut pending = Vec::new();
        for &j in group {
            let a = assignment_of(j);
            if env.probe_status(&a.assignment_id) != ProbeStatus::Removed {
                outcomes[j] = Some(outcome(
                    j,
                    ActionStatus::Skipped,
                    None,
                    "already deployed".into(),
                    t0,
                ));
            } else {
                pending.push(j);
            }
        }
        if pending.is_empty() {
            return;
        }
        let service_id = assignment_of(pending[0]).service_id;
        let Some(service) = env.service(&service_id) else {
            for j in pending {
                outcomes[j] = Some(outcome(
                    j,
                    ActionStatus::Failed,
                    None,
                    format!("unknown service `{service_id}`"),
                    t0,
                ));
            }
            return;
        };

        // Sort probes into attach modes.
        let mut by_mode: BTreeMap<AttachMode, Vec<usize>> = BTreeMap::new();
        let mut stop_the_world = Vec::new();
        for &j in &pending {
            match choose_strategy(&service, &assignment_of(j)) {
                Ok(mode) => by_mode.entry(mode).or_default().push(j),
                Err(_)
                    if self.options.allow_stop_the_world
                        && service.state == ServiceState::Running =>
                {
                    stop_the_world.push(j)
                }
                Err(e) => {
                    outcomes[j] = Some(outcome(j, ActionStatus::Failed, None, e.to_string(), t0))
                }
            }
        }

        let mut record = |idx: &[usize],
                          mode: AttachMode,
                          result: Result<AttachRecord, DeployError>,
                          env: &SimEnv,
                          outcomes: &mut [Option<ActionOutcome>]| {
            match result {
                Ok(rec) => {
                    let detail = if rec.forced_retirements.is_empty() {
                        format!("attached via {mode:?}")
                    } else {
                        format!(
                            "attached via {mode:?}; drain timed out, forced retirement of {} dropped {} requests",
                            rec.forced_retirements.join(","),
                            rec.dropped
                        )
                    };
                    for &j in idx {
                        outcomes[j] = Some(outcome(
                            j,
                            ActionStatus::Done,
                            Some(mode),
                            detail.clone(),
                            rec.finished,
                        ));
                    }
                    attachments.push(rec);
                }
                Err(e) => {
                    for &j in idx {
                        outcomes[j] = Some(outcome(
                            j,
                            ActionStatus::Failed,
                            Some(mode),
                            e.to_string(),
                            env.now(),
                        ));
                    }
                }
            }
        };

        if let Some(idx) = by_mode.remove(&AttachMode::CoDeploy) {
            let probes = idx.iter().map(|&j| assignment_of(j)).collect();
            let result =
                FunctionalBlock::new(service.clone(), probes).and_then(|b| co_deploy(b, env));
            record(&idx, AttachMode::CoDeploy, result, env, outcomes);
        }
        if let Some(idx) = by_mode.remove(&AttachMode::BlueGreenAttach) {
            let probes = idx.iter().map(|&j| assignment_of(j)).collect();
            let result = attach_blue_green(&service_id, probes, env);
            record(&idx, AttachMode::BlueGreenAttach, result, env, outcomes);
        }
        if let Some(idx) = by_mode.remove(&AttachMode::InGuestInject) {
            for j in idx {
                let result = inject_in_guest(&service_id, assignment_of(j), env);
                record(&[j], AttachMode::InGuestInject, result, env, outcomes);
            }
        }
        if !stop_the_world.is_empty() {
            let probes = stop_the_world.iter().map(|&j| assignment_of(j)).collect();
            let result = redeploy_stop_the_world(&service_id, probes, env);
            record(&stop_the_world, AttachMode::CoDeploy, result, env, outcomes);
        }
    }
}
