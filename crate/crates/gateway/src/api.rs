//! HTTP surface. Every error body is `{"error": {"code", "message"}}` with
//! a stable snake_case code.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use provgate_core::evaluator::Catalog;
use provgate_core::ledger::{LedgerError, Transaction, TxFilter, TxKind};
use provgate_core::pipeline::{PipelineError, PipelineReport};
use provgate_core::verifier::{AuthFailure, Decision, PendingState, VerifierError};
use provgate_core::pipeline::Pipeline;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::MiningMode;

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub mode: MiningMode,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, mode: MiningMode) -> Self {
        Self {
            pipeline,
            mode,
            next_id: Arc::new(AtomicU64::new(1)),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": { "code": self.code, "message": self.message } }));
        (self.status, body).into_response()
    }
}

impl From<LedgerError> for ApiError {
    fn from(e: LedgerError) -> Self {
        let (status, code) = match &e {
            LedgerError::DuplicateTxId(_) => (StatusCode::CONFLICT, "duplicate_tx_id"),
            LedgerError::UnknownDeviceKindCombination => {
                (StatusCode::UNPROCESSABLE_ENTITY, "unknown_device_kind_combination")
            }
            LedgerError::NotSubmitted { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "not_submitted"),
            LedgerError::EmptyPool => (StatusCode::CONFLICT, "empty_pool"),
            LedgerError::UnknownTransaction(_) => (StatusCode::NOT_FOUND, "unknown_transaction"),
            LedgerError::StatusConflict { .. } => (StatusCode::CONFLICT, "status_conflict"),
            LedgerError::Unavailable => (StatusCode::SERVICE_UNAVAILABLE, "ledger_unavailable"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<VerifierError> for ApiError {
    fn from(e: VerifierError) -> Self {
        let (status, code) = match &e {
            VerifierError::Unauthorized(AuthFailure::MissingToken) => (StatusCode::UNAUTHORIZED, "missing_token"),
            VerifierError::Unauthorized(AuthFailure::UnknownToken) => (StatusCode::FORBIDDEN, "invalid_token"),
            VerifierError::Unauthorized(AuthFailure::NotPermitted) => (StatusCode::FORBIDDEN, "not_permitted"),
            VerifierError::UnknownPending(_) => (StatusCode::NOT_FOUND, "unknown_pending"),
            VerifierError::AlreadyDecided(_) => (StatusCode::CONFLICT, "already_decided"),
            VerifierError::Expired(_) => (StatusCode::CONFLICT, "expired"),
            VerifierError::SelfConfirm => (StatusCode::CONFLICT, "self_confirm"),
            VerifierError::InvalidCatalog(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_catalog"),
            VerifierError::UnknownProposal(_) => (StatusCode::NOT_FOUND, "unknown_proposal"),
            VerifierError::ProposalClosed(_) => (StatusCode::CONFLICT, "proposal_closed"),
            VerifierError::NotSuspicious { .. } => (StatusCode::CONFLICT, "not_suspicious"),
            VerifierError::DuplicatePending(_) => (StatusCode::CONFLICT, "duplicate_pending"),
            VerifierError::Ledger(inner) => return ApiError::from(inner.clone()),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Ledger(e) => e.into(),
            PipelineError::Verifier(e) => e.into(),
            PipelineError::Context(e) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "context_unavailable", e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_query", e.body_text())
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

type ApiResult<T> = Result<T, ApiError>;

/// `Authorization: Bearer <token>`. A header without the scheme is taken
/// as the token itself.
fn bearer(headers: &HeaderMap) -> Option<String> {
    let raw = headers.get(header::AUTHORIZATION)?.to_str().ok()?.trim();
    let token = match raw.split_once(' ') {
        Some((scheme, rest)) if scheme.eq_ignore_ascii_case("bearer") => rest.trim(),
        _ => raw,
    };
    (!token.is_empty()).then(|| token.to_string())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/transactions", post(submit).get(list_transactions))
        .route("/transactions/{id}", get(get_transaction))
        .route("/mine", post(mine))
        .route("/chain", get(chain))
        .route("/chain/validate", get(validate_chain))
        .route("/context", get(context))
        .route("/pending", get(pending))
        .route("/pending/{id}/decision", post(decide))
        .route("/icontracts", get(active_catalog))
        .route("/icontracts/proposals", post(propose).get(proposals))
        .route("/icontracts/proposals/{id}/confirm", post(confirm))
        .route("/icontracts/proposals/{id}/abort", post(abort))
        .route("/devices", get(devices))
        .route("/metrics", get(metrics))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed here")
        })
        .with_state(state)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub tx_id: Option<String>,
    pub device_id: String,
    pub kind: TxKind,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub issuer: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub tx_id: String,
    pub status: String,
}

async fn submit(
    State(st): State<AppState>,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SubmitResponse>)> {
    let Json(req) = body?;
    let now = st.pipeline.clock().now_ms();
    let tx_id = req
        .tx_id
        .unwrap_or_else(|| format!("tx-{now}-{}", st.next_id.fetch_add(1, Ordering::Relaxed)));
    let mut tx = Transaction::new(tx_id, req.device_id, req.kind, req.issuer.unwrap_or_else(|| "anonymous".into()), now);
    tx.params = req.params;
    let tx_id = st.pipeline.submit(tx)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(SubmitResponse {
            tx_id,
            status: "submitted".into(),
        }),
    ))
}

async fn list_transactions(
    State(st): State<AppState>,
    filter: Result<Query<TxFilter>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(filter) = filter?;
    Ok(Json(st.pipeline.ledger().read_transactions(&filter)?).into_response())
}

async fn get_transaction(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let (tx, block_index) = st
        .pipeline
        .ledger()
        .get(&id)
        .ok_or_else(|| ApiError::from(LedgerError::UnknownTransaction(id)))?;
    Ok(Json(json!({ "tx": tx, "block_index": block_index })).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MineResponse {
    pub block_index: u64,
    pub hash: String,
    pub report: PipelineReport,
}

async fn mine(State(st): State<AppState>) -> ApiResult<Json<MineResponse>> {
    if st.mode != MiningMode::Manual {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "auto_mining",
            "mining runs automatically; POST /mine is only available in manual mode",
        ));
    }
    let pipeline = st.pipeline.clone();
    let report = tokio::task::spawn_blocking(move || pipeline.run_tick())
        .await
        .map_err(internal)??;
    let Some(block_index) = report.block_index else {
        return Err(LedgerError::EmptyPool.into());
    };
    let chain = st.pipeline.ledger().chain()?;
    let hash = chain.blocks[block_index as usize].hash.to_hex();
    Ok(Json(MineResponse {
        block_index,
        hash,
        report,
    }))
}

async fn chain(State(st): State<AppState>) -> ApiResult<Response> {
    let chain = st.pipeline.ledger().chain()?;
    Ok(Json(json!({ "height": chain.height(), "blocks": chain.blocks })).into_response())
}

async fn validate_chain(State(st): State<AppState>) -> ApiResult<Response> {
    Ok(Json(st.pipeline.ledger().validate()?).into_response())
}

async fn context(State(st): State<AppState>) -> ApiResult<Response> {
    Ok(Json(st.pipeline.current_context()?).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PendingQuery {
    state: Option<PendingState>,
}

async fn pending(
    State(st): State<AppState>,
    q: Result<Query<PendingQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = q?;
    let mut items = st.pipeline.verifier().list();
    if let Some(state) = q.state {
        items.retain(|p| p.state == state);
    }
    Ok(Json(items).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub decision: Decision,
}

async fn decide(
    State(st): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let token = bearer(&headers);
    // Authentication comes before body validation so a missing header is
    // always a 401.
    st.pipeline.verifier().authenticate(token.as_deref()).map_err(ApiError::from)?;
    let Json(req) = body?;
    let pipeline = st.pipeline.clone();
    let report = tokio::task::spawn_blocking(move || pipeline.decide(&id, token.as_deref(), req.decision))
        .await
        .map_err(internal)??;
    Ok(Json(report).into_response())
}

async fn active_catalog(State(st): State<AppState>) -> Response {
    let active = st.pipeline.catalog().current();
    Json(json!({ "version": active.version, "catalog": active.catalog })).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalRequest {
    pub catalog: serde_json::Value,
}

async fn propose(
    State(st): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<ProposalRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let token = bearer(&headers);
    st.pipeline.verifier().authenticate(token.as_deref()).map_err(ApiError::from)?;
    let Json(req) = body?;
    // Parse separately so schema errors surface as invalid_catalog.
    let catalog = Catalog::from_json(&req.catalog.to_string()).map_err(VerifierError::InvalidCatalog)?;
    let proposal = st.pipeline.verifier().propose_icontract_update(catalog, token.as_deref())?;
    Ok((StatusCode::CREATED, Json(proposal)).into_response())
}

async fn proposals(State(st): State<AppState>) -> Response {
    Json(st.pipeline.verifier().proposals()).into_response()
}

async fn confirm(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    let token = bearer(&headers);
    Ok(Json(st.pipeline.verifier().confirm_icontract_update(&id, token.as_deref())?).into_response())
}

async fn abort(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    let token = bearer(&headers);
    Ok(Json(st.pipeline.verifier().abort_icontract_update(&id, token.as_deref())?).into_response())
}

async fn devices(State(st): State<AppState>) -> Response {
    Json(st.pipeline.fleet().list()).into_response()
}

async fn metrics(State(st): State<AppState>) -> Response {
    let m = st.pipeline.metrics();
    Json(json!({
        "mining_mode": st.mode,
        "height": st.pipeline.ledger().height(),
        "pool": st.pipeline.ledger().pool_len(),
        "counters": m.counters,
        "factory_builds": m.factory_builds,
        "evaluations": m.evaluations,
        "stages": m.stages,
    }))
    .into_response()
}
