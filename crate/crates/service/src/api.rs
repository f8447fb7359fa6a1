use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ci3p3_core::engine::StepReport;
use ci3p3_core::view::TrialView;
use ci3p3_core::{DcCoord, DecisionTable, DesignParams, DoseGrid, Error as CoreError, MtdcResult, Recommendation};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::store::{Event, Store, StoreError, TrialRecord};

/// Error body: `{code, message, detail}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: Value,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: "bad_request", message: message.into(), detail: Value::Null }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message, "detail": self.detail }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        let (status, code, detail) = match &e {
            StoreError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", Value::Null),
            StoreError::VersionConflict { expected, actual } => {
                (StatusCode::CONFLICT, "version_conflict", json!({ "expected": expected, "actual": actual }))
            }
            StoreError::NotRecommended { recommended, requested } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "not_recommended",
                json!({ "recommended": recommended, "requested": requested }),
            ),
            StoreError::Engine(err) => match err {
                CoreError::TrialStopped => (StatusCode::CONFLICT, "trial_stopped", Value::Null),
                CoreError::SampleSizeExceeded { enrolled, requested, max_n } => (
                    StatusCode::CONFLICT,
                    "sample_size_exceeded",
                    json!({ "enrolled": enrolled, "requested": requested, "max_n": max_n }),
                ),
                CoreError::ExcludedDc(dc) => (StatusCode::UNPROCESSABLE_ENTITY, "excluded_dc", json!({ "dc": dc })),
                CoreError::OffGrid { dc, rows, cols } => {
                    (StatusCode::UNPROCESSABLE_ENTITY, "off_grid", json!({ "dc": dc, "rows": rows, "cols": cols }))
                }
                CoreError::InvalidObservation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_observation", Value::Null),
                CoreError::InvalidParams(_) | CoreError::InvalidPath(_) => {
                    (StatusCode::UNPROCESSABLE_ENTITY, "invalid_params", Value::Null)
                }
                CoreError::Integrity(_) => (StatusCode::INTERNAL_SERVER_ERROR, "integrity", Value::Null),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal", Value::Null),
            },
            StoreError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage", Value::Null),
        };
        Self { status, code, message, detail }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateTrial {
    pub grid: DoseGrid,
    #[serde(default)]
    pub params: DesignParams,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostCohort {
    pub dc: DcCoord,
    pub dlt: u32,
    pub version: u64,
    #[serde(default, rename = "override")]
    pub allow_override: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIf {
    pub dlt: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableQuery {
    pub n_max: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrialResponse {
    pub id: String,
    pub version: u64,
    pub created_at_ms: u64,
    pub params: DesignParams,
    pub view: TrialView,
    pub events: Vec<Event>,
}

impl From<&TrialRecord> for TrialResponse {
    fn from(r: &TrialRecord) -> Self {
        Self {
            id: r.id.clone(),
            version: r.version,
            created_at_ms: r.created_at_ms,
            params: r.trial.state().params.clone(),
            view: r.trial.view(),
            events: r.events.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CohortResponse {
    #[serde(flatten)]
    pub trial: TrialResponse,
    pub step: StepReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecommendationResponse {
    pub id: String,
    pub version: u64,
    pub recommendation: Recommendation,
    pub step: Option<StepReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub id: String,
    pub version: u64,
    pub dlt: u32,
    pub step: StepReport,
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/trials", post(create_trial).get(list_trials))
        .route("/trials/{id}", get(get_trial))
        .route("/trials/{id}/cohorts", post(post_cohort))
        .route("/trials/{id}/recommendation", get(get_recommendation))
        .route("/trials/{id}/what-if", post(what_if))
        .route("/trials/{id}/decision-table", get(decision_table))
        .route("/trials/{id}/finalize", post(finalize))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn create_trial(
    State(app): State<AppState>,
    body: Result<Json<CreateTrial>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<TrialResponse>)> {
    let Json(body) = body?;
    let record = app.store.create(body.grid, body.params)?;
    Ok((StatusCode::CREATED, Json(TrialResponse::from(&record))))
}

async fn list_trials(State(app): State<AppState>) -> Json<Value> {
    Json(json!({ "ids": app.store.ids() }))
}

async fn get_trial(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<TrialResponse>> {
    Ok(Json(TrialResponse::from(&app.store.get(&id)?)))
}

async fn post_cohort(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<PostCohort>, JsonRejection>,
) -> ApiResult<Json<CohortResponse>> {
    let Json(body) = body?;
    let (record, step) = app.store.record(&id, body.dc, body.dlt, body.version, body.allow_override)?;
    Ok(Json(CohortResponse { trial: TrialResponse::from(&record), step }))
}

async fn get_recommendation(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<RecommendationResponse>> {
    let r = app.store.get(&id)?;
    Ok(Json(RecommendationResponse {
        id: r.id.clone(),
        version: r.version,
        recommendation: r.trial.next_assignment(),
        step: r.trial.last_step().cloned(),
    }))
}

async fn what_if(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<WhatIf>, JsonRejection>,
) -> ApiResult<Json<WhatIfResponse>> {
    let Json(body) = body?;
    let r = app.store.get(&id)?;
    let step = r.trial.what_if(body.dlt).map_err(StoreError::from)?;
    Ok(Json(WhatIfResponse { id: r.id, version: r.version, dlt: body.dlt, step }))
}

async fn decision_table(
    State(app): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<TableQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let r = app.store.get(&id)?;
    let params = &r.trial.state().params;
    let n_max = q.n_max.unwrap_or(params.max_n.min(30));
    if n_max == 0 || n_max > 500 {
        return Err(ApiError::bad_request("n_max must be between 1 and 500"));
    }
    let table = DecisionTable::new(params.ei, params.exclusion_threshold, params.exclusion_min_n, n_max)
        .map_err(StoreError::from)?;
    let cells: Vec<Value> = table.cells().map(|(n, y, d)| json!({ "n": n, "y": y, "decision": d })).collect();
    Ok(Json(json!({
        "p_t": params.ei.target(),
        "lower": params.ei.lower(),
        "upper": params.ei.upper(),
        "exclusion_threshold": table.threshold,
        "n_max": n_max,
        "cells": cells,
        "text": table.to_text(),
    })))
}

async fn finalize(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<MtdcResult>> {
    Ok(Json(app.store.get(&id)?.trial.finalize()))
}
