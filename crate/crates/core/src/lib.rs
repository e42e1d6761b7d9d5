//! Model-driven health monitoring for cloud services.
//!
//! A [`MonitoringModel`] describes quality goals as a tree that bottoms out
//! in measurable metrics. Selecting nodes of that tree yields the metrics to
//! watch; [`resolve_probes`] turns them into probe assignments, the
//! [`Deployer`] puts those probes onto services in a [`SimEnv`], the
//! [`Collector`] stores what they report, and [`snapshot`] folds the samples
//! back up the tree into per-node health.

pub mod aggregator;
pub mod collector;
pub mod deployer;
pub mod model;
pub mod resolver;
pub mod simenv;
#[cfg(feature = "testkit")]
pub mod testkit;

pub use aggregator::{
    classify, fold_scores, normalize_metric, snapshot, AggregateError, HealthSnapshot, HealthState,
    MetricValue, NodeScore, Thresholds, Window,
};
pub use collector::{
    derive_failure_stats, Collector, CollectorConfig, CollectorError, FailureStats, KpiSample,
    Point, SeriesSource, SeriesWindow, WindowStats,
};
pub use deployer::{
    choose_strategy, ActionOutcome, ActionStatus, DeployError, Deployer, DeployerOptions,
    DeploymentReport, FunctionalBlock,
};
pub use model::{
    default_model, load_model, validate, Direction, Fold, GoalSelection, MetricDef, ModelDocument,
    ModelError, ModelNode, ModelPatch, MonitoringModel, NodeKind, Statistic, Violation,
};
pub use resolver::{
    default_catalog, plan_diff, resolve_probes, AttachMode, DeploymentPlan, Layer, PlanAction,
    ProbeAssignment, ProbeCatalog, ProbeSpec, ProbeStatus, ResolveError, ServiceDescriptor,
    ServiceState,
};
pub use simenv::{
    demo_scenario, start_scenario, BehaviorProfile, FaultEvent, FaultKind, RequestLedger,
    ScenarioSpec, SimEnv, SimError,
};
