//! HTTP service exposing monitoring models, actor selections and health
//! snapshots, backed by a simulated cloud.

pub mod error;
pub mod http;
pub mod service;

use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;

pub use error::{ApiError, ErrorBody};
pub use http::router;
pub use service::{
    Actor, ActorProfile, MonitoringService, SelectionRequest, SelectionResponse, ServiceConfig,
    ServiceEvent, WindowSpec,
};

/// How the background loop drives the simulation clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickConfig {
    /// Wall-clock period of the loop.
    pub period: Duration,
    /// Simulated milliseconds per wall-clock millisecond.
    pub speed: f64,
}

impl Default for TickConfig {
    fn default() -> Self {
        TickConfig {
            period: Duration::from_millis(250),
            speed: 10.0,
        }
    }
}

/// Advances the simulation forever at the configured pace.
pub async fn run_clock(service: Arc<MonitoringService>, tick: TickConfig) {
    let dt = (tick.period.as_secs_f64() * 1000.0 * tick.speed)
        .round()
        .max(1.0) as u64;
    let mut interval = tokio::time::interval(tick.period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        let svc = service.clone();
        if tokio::task::spawn_blocking(move || svc.tick(dt))
            .await
            .is_err()
        {
            tracing::error!("simulation tick panicked; stopping the clock");
            return;
        }
    }
}

/// Serves the API on `listener` and runs the simulation clock until the
/// process receives Ctrl-C.
pub async fn serve(
    listener: TcpListener,
    service: Arc<MonitoringService>,
    tick: TickConfig,
) -> std::io::Result<()> {
    let clock = tokio::spawn(run_clock(service.clone(), tick));
    let result = axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    clock.abort();
    result
}
