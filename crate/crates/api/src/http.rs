//! Routes under `/api/v1`.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use tokio::sync::broadcast::error::RecvError;
use tower_http::cors::CorsLayer;

use cloudhealth_core::model::ModelPatch;
use cloudhealth_core::simenv::FaultEvent;

use crate::error::ApiError;
use crate::service::{ActorProfile, MonitoringService, SelectionRequest, WindowSpec};

type AppState = Arc<MonitoringService>;

pub fn router(service: Arc<MonitoringService>) -> Router {
    let api = Router::new()
        .route("/model", get(get_model))
        .route("/model/extend", post(extend_model))
        .route("/catalog", get(get_catalog))
        .route("/actors", get(list_actors))
        .route("/actors/{id}", get(get_actor))
        .route("/actors/{id}/profile", put(put_profile))
        .route("/actors/{id}/selection", put(put_selection))
        .route("/actors/{id}/health", get(actor_health))
        .route("/health/node/{id}", get(node_health))
        .route("/kpis", get(kpis))
        .route("/probes", get(probes))
        .route("/probes/{id}", put(register_probe))
        .route("/events", get(events))
        .route("/ingest", post(ingest))
        .route("/sim", get(sim_status))
        .route("/sim/faults", post(inject_fault));
    Router::new()
        .nest("/api/v1", api)
        .route("/ingest", post(ingest))
        .fallback(|| async { ApiError::not_found("no such route") })
        .layer(CorsLayer::permissive())
        .with_state(service)
}

/// Parses a JSON body, mapping failures onto the error envelope.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &str) -> Result<T, ApiError> {
    serde_json::from_str(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn get_model(State(svc): State<AppState>) -> impl IntoResponse {
    Json(svc.model().to_document())
}

async fn extend_model(
    State(svc): State<AppState>,
    body: String,
) -> Result<impl IntoResponse, ApiError> {
    let patch: ModelPatch = parse_body(&body)?;
    let doc = tokio::task::spawn_blocking(move || svc.extend_model(&patch))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(doc))
}

async fn get_catalog(State(svc): State<AppState>) -> impl IntoResponse {
    Json(svc.catalog())
}

async fn list_actors(State(svc): State<AppState>) -> impl IntoResponse {
    Json(svc.actors())
}

async fn get_actor(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, ApiError> {
    svc.actor(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown actor `{id}`")))
}

async fn put_profile(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    body: String,
) -> Result<impl IntoResponse, ApiError> {
    let profile: ActorProfile = parse_body(&body)?;
    Ok(Json(svc.set_profile(&id, profile)?))
}

async fn put_selection(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    body: String,
) -> Result<impl IntoResponse, ApiError> {
    let request: SelectionRequest = parse_body(&body)?;
    let response = tokio::task::spawn_blocking(move || svc.set_selection(&id, request))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(response))
}

#[derive(Debug, Deserialize)]
struct HealthQuery {
    window: Option<String>,
    actor: Option<String>,
}

impl HealthQuery {
    fn window(&self) -> Result<Option<WindowSpec>, ApiError> {
        self.window.as_deref().map(str::parse).transpose()
    }
}

async fn actor_health(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HealthQuery>,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.health(&id, q.window()?)?))
}

async fn node_health(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HealthQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let actor = q
        .actor
        .as_deref()
        .ok_or_else(|| ApiError::bad_request("missing `actor` parameter"))?;
    Ok(Json(svc.node_health(&id, actor, q.window()?)?))
}

#[derive(Debug, Deserialize)]
struct KpiQuery {
    metric: Option<String>,
    service: Option<String>,
    from: Option<u64>,
    to: Option<u64>,
}

/// With `metric` and `service`: that series over `[from, to)`. Without:
/// the latest value of every series.
async fn kpis(
    State(svc): State<AppState>,
    Query(q): Query<KpiQuery>,
) -> Result<Response, ApiError> {
    match (q.metric, q.service) {
        (Some(metric), Some(service)) => {
            Ok(Json(svc.series(&metric, &service, q.from, q.to)?).into_response())
        }
        (None, None) => Ok(Json(svc.kpis()).into_response()),
        _ => Err(ApiError::bad_request("`metric` and `service` go together")),
    }
}

async fn register_probe(State(svc): State<AppState>, Path(id): Path<String>) -> impl IntoResponse {
    svc.register_probe(&id);
    StatusCode::NO_CONTENT
}

async fn probes(State(svc): State<AppState>) -> impl IntoResponse {
    Json(svc.probes())
}

/// 204 when every line was stored, otherwise 400 with the per-line errors.
/// Good lines in a partly bad body are still stored.
async fn ingest(State(svc): State<AppState>, body: String) -> Response {
    let report = svc.ingest(&body);
    if report.rejected.is_empty() {
        StatusCode::NO_CONTENT.into_response()
    } else {
        (StatusCode::BAD_REQUEST, Json(report)).into_response()
    }
}

async fn sim_status(State(svc): State<AppState>) -> impl IntoResponse {
    Json(svc.sim_status())
}

async fn inject_fault(
    State(svc): State<AppState>,
    body: String,
) -> Result<impl IntoResponse, ApiError> {
    let fault: FaultEvent = parse_body(&body)?;
    svc.inject_fault(fault)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn events(State(svc): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = svc.subscribe();
    let stream = stream::unfold(rx, |mut rx| async move {
        let event = match rx.recv().await {
            Ok(ev) => Event::default()
                .event(ev.name())
                .data(serde_json::to_string(&ev).unwrap_or_default()),
            Err(RecvError::Lagged(n)) => Event::default().event("lagged").data(n.to_string()),
            Err(RecvError::Closed) => return None,
        };
        Some((Ok(event), rx))
    });
    Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}
