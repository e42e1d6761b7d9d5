use std::collections::BTreeSet;

use cloudhealth_api::service::{
    ActorProfile, MonitoringService, SelectionRequest, ServiceConfig, ServiceEvent,
};
use cloudhealth_core::model::{Attach, ModelNode, ModelPatch, NodeKind};
use cloudhealth_core::{
    default_catalog, default_model, demo_scenario, resolve_probes, HealthState,
};

fn service(config: ServiceConfig) -> MonitoringService {
    MonitoringService::new(default_model(), default_catalog(), &demo_scenario(), config).unwrap()
}

fn select(nodes: &[&str], services: &[&str]) -> SelectionRequest {
    SelectionRequest {
        node_ids: nodes.iter().map(|s| s.to_string()).collect(),
        service_ids: Some(services.iter().map(|s| s.to_string()).collect()),
    }
}

fn active_ids(svc: &MonitoringService) -> BTreeSet<String> {
    svc.probes()
        .into_iter()
        .map(|p| p.assignment.assignment_id)
        .collect()
}

#[test]
fn active_probes_follow_the_union_of_selections() {
    let svc = service(ServiceConfig::default());
    svc.set_selection(
        "manager",
        select(&["Reliability", "ResourceUtilization"], &["frontend"]),
    )
    .unwrap();
    svc.set_selection(
        "tech",
        select(&["ResourceUtilization", "TimeBehaviour"], &["frontend"]),
    )
    .unwrap();

    let model = svc.model();
    let union: BTreeSet<String> = ["Reliability", "ResourceUtilization", "TimeBehaviour"]
        .map(String::from)
        .into();
    let metrics = model.subtree_metrics(&union).unwrap();
    let frontend = svc
        .sim_status()
        .services
        .into_iter()
        .find(|s| s.service.service_id == "frontend")
        .unwrap();
    let want: BTreeSet<String> =
        resolve_probes(&metrics, [&frontend.service], &svc.catalog(), &model)
            .unwrap()
            .into_iter()
            .map(|a| a.assignment_id)
            .collect();
    assert_eq!(active_ids(&svc), want);

    let shared = svc
        .probes()
        .into_iter()
        .find(|p| p.assignment.probe_kind == "resource-probe")
        .unwrap();
    assert_eq!(shared.refcount, 2);
    let before = active_ids(&svc);

    svc.set_selection("tech", SelectionRequest::default())
        .unwrap();
    let after = active_ids(&svc);
    assert!(after.is_subset(&before));
    for gone in before.difference(&after) {
        assert!(
            !gone.starts_with("resource-probe") && !gone.starts_with("heartbeat"),
            "{gone}"
        );
    }
    assert!(after.contains(&shared.assignment.assignment_id));
}

#[test]
fn concurrent_update_for_the_same_actor_is_refused() {
    let svc = service(ServiceConfig::default());
    let guard = svc.try_begin_update("a").unwrap();
    let err = svc
        .set_selection("a", select(&["Performance"], &["frontend"]))
        .unwrap_err();
    assert_eq!(err.status.as_u16(), 409);
    // Other actors are unaffected.
    svc.set_selection("b", select(&["Performance"], &["frontend"]))
        .unwrap();
    drop(guard);
    svc.set_selection("a", select(&["Performance"], &["frontend"]))
        .unwrap();
}

#[test]
fn bad_selections_are_rejected() {
    let svc = service(ServiceConfig::default());
    let cases = [
        (select(&["Nope"], &["frontend"]), "unknown_node"),
        (
            select(&["Responsiveness"], &["frontend"]),
            "unresolved_stub",
        ),
        (select(&["Performance"], &["ghost"]), "unknown_service"),
    ];
    for (req, code) in cases {
        let err = svc.set_selection("a", req).unwrap_err();
        assert_eq!(err.status.as_u16(), 422);
        assert_eq!(err.code(), code);
    }
    assert!(svc.probes().is_empty());
}

#[test]
fn health_needs_a_selection() {
    let svc = service(ServiceConfig::default());
    assert_eq!(svc.health("nobody", None).unwrap_err().status.as_u16(), 404);
    svc.set_profile(
        "idle",
        ActorProfile {
            display_name: "Idle".into(),
            role: "manager".into(),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(svc.health("idle", None).unwrap_err().status.as_u16(), 404);
}

#[test]
fn snapshots_turn_healthy_once_samples_arrive() {
    let svc = service(ServiceConfig::default());
    svc.set_selection("a", select(&["ResourceUtilization"], &["frontend"]))
        .unwrap();
    svc.tick(10_000);
    let snap = svc.health("a", None).unwrap();
    assert_eq!(
        snap.state("ResourceUtilization"),
        Some(HealthState::Healthy)
    );
    let detail = svc.node_health("ResourceUtilization", "a", None).unwrap();
    let kids: Vec<&str> = detail.children.iter().map(|c| c.node_id.as_str()).collect();
    assert_eq!(kids, ["CpuUsage", "MemoryUsage"]);
    assert_eq!(
        svc.node_health("Availability", "a", None)
            .unwrap_err()
            .status
            .as_u16(),
        404
    );
}

#[test]
fn reads_do_not_change_state() {
    let svc = service(ServiceConfig::default());
    svc.set_selection("a", select(&["Performance"], &["frontend", "orders"]))
        .unwrap();
    svc.tick(5000);
    let (now, probes, samples) = (svc.now(), active_ids(&svc), svc.collector().len());
    for _ in 0..5 {
        svc.health("a", None).unwrap();
        svc.node_health("Performance", "a", None).unwrap();
        svc.kpis();
        svc.probes();
        svc.model();
        svc.catalog();
        svc.actors();
        svc.sim_status();
    }
    assert_eq!(
        (svc.now(), active_ids(&svc), svc.collector().len()),
        (now, probes, samples)
    );
}

#[test]
fn selections_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        state_file: Some(dir.path().join("state.json")),
        ..Default::default()
    };
    let first = service(config.clone());
    first
        .set_selection("a", select(&["Performance"], &["orders"]))
        .unwrap();
    let before = active_ids(&first);
    drop(first);

    let second = service(config);
    assert_eq!(
        second.actor("a").unwrap().selection.unwrap().node_ids.len(),
        1
    );
    assert_eq!(active_ids(&second), before);
}

#[test]
fn model_extension_keeps_selections() {
    let svc = service(ServiceConfig::default());
    svc.set_selection("a", select(&["Performance"], &["frontend"]))
        .unwrap();

    let patch = ModelPatch {
        add_nodes: vec![
            ModelNode::new("Security", NodeKind::Goal).with_children(["Confidentiality"]),
            ModelNode::new("Confidentiality", NodeKind::Subgoal),
        ],
        add_stubs: vec!["Security".into(), "Confidentiality".into()],
        ..Default::default()
    };
    let doc = svc.extend_model(&patch).unwrap();
    assert_eq!(doc.version, 2);
    assert_eq!(svc.actor("a").unwrap().selection.unwrap().model_version, 2);
    svc.health("a", None).unwrap();

    let remove = ModelPatch {
        remove_nodes: vec!["TimeBehaviour".into()],
        ..Default::default()
    };
    assert_eq!(svc.extend_model(&remove).unwrap_err().status.as_u16(), 409);

    let bad = ModelPatch {
        attach: vec![Attach {
            parent: "Security".into(),
            child: "latency".into(),
        }],
        ..Default::default()
    };
    assert_eq!(svc.extend_model(&bad).unwrap_err().status.as_u16(), 422);
    assert_eq!(svc.model().version(), 2);
}

#[test]
fn events_are_published() {
    let svc = service(ServiceConfig::default());
    let mut rx = svc.subscribe();
    svc.set_selection("a", select(&["Reliability"], &["frontend"]))
        .unwrap();
    assert_eq!(rx.try_recv().unwrap().name(), "plan-applied");
    // The demo scenario takes frontend down at 120 s.
    svc.tick(130_000);
    let mut names = Vec::new();
    while let Ok(ev) = rx.try_recv() {
        if let ServiceEvent::FaultDetected { service_id, ts } = &ev {
            assert_eq!(service_id, "frontend");
            assert!((120_000..=121_000).contains(ts));
        }
        names.push(ev.name());
    }
    assert!(names.contains(&"fault-detected"));
    assert!(names.contains(&"snapshot-updated"));
}

#[test]
fn ingest_reports_line_errors() {
    let svc = service(ServiceConfig::default());
    svc.register_probe("ext");
    let body = concat!(
        r#"{"probe_id":"ext","service_id":"frontend","metric_id":"latency","ts":5,"value":12.5,"unit":"ms"}"#,
        "\n",
        r#"{"probe_id":"ext","service_id":"frontend","metric_id":"latency","ts":6,"value":1,"unit":"s"}"#,
        "\n",
        "not json\n",
        r#"{"probe_id":"rogue","service_id":"frontend","metric_id":"latency","ts":7,"value":1,"unit":"ms"}"#,
    );
    let report = svc.ingest(body);
    assert_eq!(report.accepted, 1);
    assert_eq!(
        report.rejected.iter().map(|e| e.line).collect::<Vec<_>>(),
        [2, 3, 4]
    );
}

#[test]
fn identical_selection_yields_empty_plan() {
    let svc = service(ServiceConfig::default());
    let first = svc
        .set_selection("a", select(&["Performance"], &["frontend"]))
        .unwrap();
    assert!(!first.plan.is_empty());
    let again = svc
        .set_selection("a", select(&["Performance"], &["frontend"]))
        .unwrap();
    assert!(again.plan.is_empty());
    assert!(again.report.outcomes.is_empty());
}

#[test]
fn latency_fault_degrades_performance_through_time_behaviour() {
    let svc = service(ServiceConfig::default());
    svc.set_selection("ops", select(&["Performance"], &["orders"]))
        .unwrap();
    // The demo scenario multiplies orders latency by 20 from 200 s to 260 s.
    svc.tick(259_000 - svc.now());
    let detail = svc.node_health("Performance", "ops", None).unwrap();
    assert_eq!(detail.node.state, HealthState::Degraded);
    let worst = detail
        .children
        .iter()
        .min_by(|a, b| a.score.unwrap().total_cmp(&b.score.unwrap()))
        .unwrap();
    assert_eq!(worst.node_id, "TimeBehaviour");
}

#[test]
fn each_actor_sees_only_its_goals() {
    let svc = service(ServiceConfig::default());
    svc.set_selection("m", select(&["Performance"], &["frontend"]))
        .unwrap();
    svc.set_selection("t", select(&["Reliability"], &["frontend"]))
        .unwrap();
    svc.tick(10_000);
    let m = svc.health("m", None).unwrap();
    let t = svc.health("t", None).unwrap();
    assert_eq!(m.roots, ["Performance"]);
    assert_eq!(t.roots, ["Reliability"]);
    assert!(!m.scores.contains_key("Availability"));
    assert!(!t.scores.contains_key("TimeBehaviour"));
}

#[test]
fn narrowing_the_union_keeps_probes_in_use() {
    let svc = service(ServiceConfig::default());
    svc.set_selection("a", select(&["Latency"], &["frontend"]))
        .unwrap();
    svc.set_selection("b", select(&["ResponseTime"], &["frontend"]))
        .unwrap();
    let probes = svc.probes();
    assert_eq!(probes.len(), 1);
    let shared = &probes[0];
    assert_eq!(shared.refcount, 2);
    let activated = shared.activated_at;

    let response = svc.set_selection("b", SelectionRequest::default()).unwrap();
    assert!(response.plan.is_empty());
    let after = svc.probes();
    assert_eq!(after.len(), 1);
    assert_eq!(
        after[0].assignment.assignment_id,
        shared.assignment.assignment_id
    );
    assert_eq!(after[0].activated_at, activated);
    assert_eq!(after[0].actors, ["a"]);

    svc.set_selection("a", SelectionRequest::default()).unwrap();
    assert!(svc.probes().is_empty());
}
