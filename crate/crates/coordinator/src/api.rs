//! HTTP API.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};
use yomo_core::{Command, PowerReading};

use crate::coordinator::{Coordinator, DispatchError};
use crate::service::CommandSender;
use crate::store::{MeterRecord, SeriesQuery, StoreError};

pub const DEFAULT_PAGE: usize = 1000;
pub const MAX_PAGE: usize = 10_000;

#[derive(Clone)]
pub struct AppState {
    pub coordinator: Arc<Coordinator>,
    pub sender: CommandSender,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::UnknownMeter(_) => StatusCode::NOT_FOUND,
            StoreError::InvertedWindow { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<DispatchError> for ApiError {
    fn from(e: DispatchError) -> Self {
        let status = match e {
            DispatchError::NotFound(_) => StatusCode::NOT_FOUND,
            DispatchError::Stale { .. } => StatusCode::CONFLICT,
            DispatchError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(status, e.to_string())
    }
}

pub fn router(state: AppState, cors_origin: &str) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match cors_origin {
        "*" => cors.allow_origin(Any),
        origin => match HeaderValue::from_str(origin) {
            Ok(v) => cors.allow_origin(v),
            Err(_) => cors.allow_origin(Any),
        },
    };
    Router::new()
        .route("/api/health", get(health))
        .route("/api/meters", get(meters))
        .route("/api/meters/{id}/readings", get(readings))
        .route("/api/meters/{id}/command", post(command))
        .route("/api/tickets/{id}", get(ticket))
        .layer(cors)
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.coordinator.health())
}

#[derive(Serialize)]
struct MeterView {
    #[serde(flatten)]
    record: MeterRecord,
    last_reading: Option<PowerReading>,
}

async fn meters(State(s): State<AppState>) -> impl IntoResponse {
    let store = s.coordinator.store();
    let views: Vec<MeterView> = store
        .meters()
        .into_iter()
        .map(|record| MeterView {
            last_reading: store.last_reading(record.storage_id),
            record,
        })
        .collect();
    Json(views)
}

#[derive(Debug, Deserialize)]
struct ReadingsParams {
    from: Option<u64>,
    to: Option<u64>,
    max: Option<usize>,
    after: Option<u32>,
}

async fn readings(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(p): Query<ReadingsParams>,
) -> Result<impl IntoResponse, ApiError> {
    let store = s.coordinator.store();
    let sid = store
        .lookup(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown meter `{id}`")))?;
    let page = store.query_series(
        sid,
        SeriesQuery {
            from_ms: p.from.unwrap_or(0),
            to_ms: p.to.unwrap_or(u64::MAX),
            max: p.max.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE),
            after: p.after,
        },
    )?;
    Ok(Json(page))
}

async fn command(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Command>, axum::extract::rejection::JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(cmd) = body.map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    let dispatch = s.coordinator.dispatch(&id, cmd)?;
    let ticket = dispatch.ticket.clone();
    s.sender.spawn(dispatch);
    Ok((StatusCode::ACCEPTED, Json(ticket)))
}

async fn ticket(
    State(s): State<AppState>,
    Path(id): Path<u32>,
) -> Result<impl IntoResponse, ApiError> {
    s.coordinator
        .ticket(id)
        .map(Json)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown ticket {id}")))
}
