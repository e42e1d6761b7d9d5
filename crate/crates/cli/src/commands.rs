use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use serde::Serialize;

use cloudhealth_api::{MonitoringService, SelectionRequest, ServiceConfig, TickConfig};
use cloudhealth_core::aggregator::{snapshot as take_snapshot, Thresholds, Window};
use cloudhealth_core::collector::{Collector, CollectorConfig};
use cloudhealth_core::model::{validate as validate_doc, GoalSelection, ModelDocument};
use cloudhealth_core::{
    default_catalog, default_model, demo_scenario, load_model, resolve_probes, Layer,
    MonitoringModel, ProbeAssignment, ProbeCatalog, ScenarioSpec, ServiceDescriptor,
};

use crate::{Inputs, RecordArgs, ResolveArgs, ServeArgs, SnapshotArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad model, selection, scenario or trace content. Exit code 2.
    Validation(String),
    /// I/O and everything else. Exit code 3.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn read(path: &Path) -> Result<String, CliError> {
    Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).context("serializing output")?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        // A closed pipe (`| head`) is the reader's choice, not a failure.
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Runtime(e.into())),
        _ => Ok(()),
    }
}

fn load_inputs(inputs: &Inputs) -> Result<(MonitoringModel, ProbeCatalog), CliError> {
    let model = match &inputs.model {
        Some(path) => load_model(&read(path)?).map_err(invalid)?,
        None => default_model(),
    };
    let catalog = match &inputs.catalog {
        Some(path) => ProbeCatalog::from_json(&read(path)?).map_err(invalid)?,
        None => default_catalog(),
    };
    Ok((model, catalog))
}

fn load_scenario(path: Option<&Path>) -> Result<ScenarioSpec, CliError> {
    match path {
        Some(p) => ScenarioSpec::from_json(&read(p)?).map_err(invalid),
        None => Ok(demo_scenario()),
    }
}

fn goal_set(goals: &[String]) -> BTreeSet<String> {
    goals
        .iter()
        .map(|g| g.trim().to_string())
        .filter(|g| !g.is_empty())
        .collect()
}

pub fn serve(inputs: &Inputs, args: ServeArgs) -> Result<(), CliError> {
    let (model, catalog) = load_inputs(inputs)?;
    let scenario = load_scenario(args.scenario.as_deref())?;
    if !(args.speed.is_finite() && args.speed > 0.0) {
        return Err(invalid(format!(
            "--speed must be positive, got {}",
            args.speed
        )));
    }
    let config = ServiceConfig {
        state_file: args.state_file,
        trace_file: args.trace,
        ..Default::default()
    };
    let service = MonitoringService::new(model, catalog, &scenario, config).map_err(invalid)?;
    let addr: SocketAddr = format!("{}:{}", args.bind, args.port)
        .parse()
        .map_err(|e| invalid(format!("bad address `{}:{}`: {e}", args.bind, args.port)))?;
    let tick = TickConfig {
        period: Duration::from_millis(250),
        speed: if args.realtime { 1.0 } else { args.speed },
    };

    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!(
            "listening on http://{}",
            listener.local_addr().context("local address")?
        );
        cloudhealth_api::serve(listener, Arc::new(service), tick)
            .await
            .context("serving")?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

#[derive(Serialize)]
struct Resolution {
    goals: BTreeSet<String>,
    metrics: BTreeSet<String>,
    assignments: Vec<ProbeAssignment>,
}

/// `id[:layer]`, taking the layer from `known` when none is given.
fn parse_service(arg: &str, known: &[ServiceDescriptor]) -> Result<ServiceDescriptor, CliError> {
    let (id, layer) = match arg.split_once(':') {
        Some((id, layer)) => (id.trim(), Some(layer.parse::<Layer>().map_err(invalid)?)),
        None => (arg.trim(), None),
    };
    if id.is_empty() {
        return Err(invalid(format!("empty service id in `{arg}`")));
    }
    let mut svc = known
        .iter()
        .find(|s| s.service_id == id)
        .cloned()
        .unwrap_or_else(|| ServiceDescriptor::new(id, Layer::VM));
    if let Some(layer) = layer {
        svc.layer = layer;
    }
    Ok(svc)
}

pub fn resolve(inputs: &Inputs, args: ResolveArgs) -> Result<(), CliError> {
    let (model, catalog) = load_inputs(inputs)?;
    let scenario = load_scenario(args.scenario.as_deref())?;
    let known: Vec<ServiceDescriptor> = scenario
        .services
        .iter()
        .map(|e| e.service.clone())
        .collect();
    let services = if args.services.is_empty() {
        known.clone()
    } else {
        args.services
            .iter()
            .map(|s| parse_service(s, &known))
            .collect::<Result<_, _>>()?
    };

    let goals = goal_set(&args.goals);
    let metrics = model.subtree_metrics(&goals).map_err(invalid)?;
    let assignments = resolve_probes(&metrics, &services, &catalog, &model).map_err(invalid)?;
    print_json(&Resolution {
        goals,
        metrics,
        assignments,
    })
}

pub fn snapshot(inputs: &Inputs, args: SnapshotArgs) -> Result<(), CliError> {
    let (model, _) = load_inputs(inputs)?;
    let trace = read(&args.replay)?;
    let config = CollectorConfig {
        retention_ms: u64::MAX,
        ..Default::default()
    };
    let (collector, errors) = Collector::replay(&model, config, &trace);
    if let Some(e) = errors.first() {
        return Err(invalid(format!(
            "{}: {} bad line(s), first at line {}: {}",
            args.replay.display(),
            errors.len(),
            e.line,
            e.error
        )));
    }

    let dump = collector.dump();
    let window = match &args.window {
        Some(w) => parse_window(w)?,
        None => {
            let from = dump.iter().map(|(_, _, p)| p.ts).min().unwrap_or(0);
            let to = dump.iter().map(|(_, _, p)| p.ts).max().map_or(1, |t| t + 1);
            Window::new(from, to)
        }
    };
    let services: BTreeSet<String> = if args.services.is_empty() {
        dump.iter().map(|(_, s, _)| s.clone()).collect()
    } else {
        goal_set(&args.services)
    };

    let selection = GoalSelection::new("replay", goal_set(&args.goals), services)
        .bind(&model)
        .map_err(invalid)?;
    let snap = take_snapshot(
        &model,
        &selection,
        window,
        &collector,
        &Thresholds::default(),
    )
    .map_err(invalid)?;
    print_json(&snap)
}

fn parse_window(s: &str) -> Result<Window, CliError> {
    let bad = || {
        invalid(format!(
            "--window must be `from,to` in milliseconds, got `{s}`"
        ))
    };
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let from: u64 = a.trim().parse().map_err(|_| bad())?;
    let to: u64 = b.trim().parse().map_err(|_| bad())?;
    if from >= to {
        return Err(invalid(format!("empty window [{from}, {to})")));
    }
    Ok(Window::new(from, to))
}

#[derive(Serialize)]
struct ValidationReport {
    valid: bool,
    violations: Vec<cloudhealth_core::Violation>,
}

pub fn validate(inputs: &Inputs) -> Result<(), CliError> {
    let doc = match &inputs.model {
        Some(path) => serde_json::from_str::<ModelDocument>(&read(path)?)
            .map_err(|e| invalid(format!("parse: {e}")))?,
        None => default_model().to_document(),
    };
    let violations = validate_doc(&doc);
    let valid = violations.is_empty();
    print_json(&ValidationReport { valid, violations })?;
    if valid {
        Ok(())
    } else {
        Err(invalid("model has violations"))
    }
}

pub fn record(inputs: &Inputs, args: RecordArgs) -> Result<(), CliError> {
    let (model, catalog) = load_inputs(inputs)?;
    let scenario = load_scenario(args.scenario.as_deref())?;
    if args.out.exists() {
        fs::remove_file(&args.out).with_context(|| format!("replacing {}", args.out.display()))?;
    }
    let duration = args.duration.unwrap_or(scenario.duration);
    let config = ServiceConfig {
        trace_file: Some(args.out.clone()),
        ..Default::default()
    };
    let service = MonitoringService::new(model, catalog, &scenario, config).map_err(invalid)?;
    let request = SelectionRequest {
        node_ids: goal_set(&args.goals),
        service_ids: if args.services.is_empty() {
            None
        } else {
            Some(goal_set(&args.services))
        },
    };
    service
        .set_selection("recorder", request)
        .map_err(invalid)?;
    let remaining = duration.saturating_sub(service.now());
    service.tick(remaining);
    service.collector().flush();
    tracing::info!(
        "recorded {} samples up to {} ms into {}",
        service.collector().len(),
        service.now(),
        args.out.display()
    );
    Ok(())
}
