use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{middleware, Extension, Json, Router};
use dds_core::hpo::{EvaluatorHub, HpoError};
use dds_core::pipeline::PipelineStats;
use dds_core::store::{
    Collection, CollectionKind, Content, ContentStatus, Lifecycle, Record, Request, RequestStatus, Store, WorkRecord,
};
use dds_core::wire::{WireError, WireRequest};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::auth::{require_token, Subject, TokenStore};
use crate::error::ApiError;
use crate::metrics::AuditCounters;
use crate::{DEFAULT_PAGE_SIZE, IDEMPOTENCY_HEADER, MAX_PAGE_SIZE};

/// Shared handler state. Handlers hold no state of their own beyond the
/// metrics cursor, so any number of clients may be served concurrently.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    store: Store,
    tokens: TokenStore,
    hub: Option<Arc<Mutex<EvaluatorHub>>>,
    stats: Option<Arc<PipelineStats>>,
    counters: Mutex<AuditCounters>,
}

impl AppState {
    pub fn new(store: Store, tokens: TokenStore) -> Self {
        Self::hosting(store, tokens, None, None)
    }

    /// State for a service that also hosts the daemons and the HPO
    /// evaluator hub in-process.
    pub fn hosting(
        store: Store,
        tokens: TokenStore,
        hub: Option<Arc<Mutex<EvaluatorHub>>>,
        stats: Option<Arc<PipelineStats>>,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                store,
                tokens,
                hub,
                stats,
                counters: Mutex::new(AuditCounters::default()),
            }),
        }
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn tokens(&self) -> &TokenStore {
        &self.inner.tokens
    }

    fn hub(&self) -> Result<&Arc<Mutex<EvaluatorHub>>, ApiError> {
        self.inner
            .hub
            .as_ref()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "hpo_disabled", "no evaluator hub is hosted here"))
    }
}

pub fn router(state: AppState) -> Router {
    let authed = Router::new()
        .route("/requests", post(post_request))
        .route("/requests/{id}", get(get_request))
        .route("/requests/{id}/collections", get(list_collections))
        .route("/collections/{cid}/contents", get(list_contents))
        .route("/hpo/{task}/points", get(fetch_points))
        .route("/hpo/points/{id}/loss", post(report_loss))
        .route("/hpo/points/{id}/failure", post(report_failure))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/metrics", get(metrics))
        .merge(authed)
        .with_state(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submitted {
    pub request_id: String,
}

fn idempotency_key(headers: &HeaderMap) -> Result<Option<String>, ApiError> {
    let Some(v) = headers.get(IDEMPOTENCY_HEADER) else {
        return Ok(None);
    };
    let k = v
        .to_str()
        .map_err(|_| ApiError::bad_request("Idempotency-Key must be visible ASCII"))?;
    if k.is_empty() || k.len() > 255 || !k.bytes().all(|b| b.is_ascii_graphic()) {
        return Err(ApiError::bad_request("Idempotency-Key must be 1 to 255 visible ASCII characters"));
    }
    Ok(Some(k.to_string()))
}

fn wire_error(e: WireError) -> ApiError {
    match e {
        WireError::Syntax { line, column, message } => ApiError::new(StatusCode::BAD_REQUEST, "malformed", message)
            .with_details(json!({"line": line, "column": column})),
        WireError::Version(_) => ApiError::new(StatusCode::BAD_REQUEST, "unsupported_version", e.to_string()),
        WireError::Invalid(report) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_workflow", "workflow is not well-formed")
            .with_details(serde_json::to_value(&report).unwrap_or(Value::Null)),
    }
}

async fn post_request(
    State(state): State<AppState>,
    Extension(Subject(subject)): Extension<Subject>,
    headers: HeaderMap,
    body: String,
) -> Result<Response, ApiError> {
    let key = idempotency_key(&headers)?;
    let wire = WireRequest::parse_valid(&body).map_err(wire_error)?;
    // Digest of the canonical form, so formatting differences do not
    // count as a different body.
    let digest = hex::encode(Sha256::digest(wire.render().as_bytes()));
    let store = state.store();
    let workflow = serde_json::to_string(&wire.workflow).expect("workflow serializes");
    let (req, created) = store.insert_request_once(|id| Request {
        request_id: id,
        requester: subject.clone(),
        workflow,
        consumer: wire.consumer.clone(),
        status: RequestStatus::New,
        created_at: store.now(),
        updated_at: 0,
        report: None,
        error: None,
        idempotency_key: key.clone(),
        body_digest: Some(digest.clone()),
    })?;
    let body = Json(Submitted {
        request_id: req.request_id.clone(),
    });
    if created {
        tracing::info!(request = %req.request_id, %subject, "request submitted");
        return Ok((StatusCode::CREATED, body).into_response());
    }
    if req.body_digest.as_deref() == Some(digest.as_str()) {
        Ok((StatusCode::OK, body).into_response())
    } else {
        Err(ApiError::new(
            StatusCode::CONFLICT,
            "idempotency_conflict",
            "Idempotency-Key was already used with a different body",
        )
        .with_details(json!({"request_id": req.request_id})))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkSummary {
    pub work_id: String,
    pub template: String,
    pub status: String,
    pub generation: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestView {
    pub request_id: String,
    pub requester: String,
    pub consumer: String,
    pub status: RequestStatus,
    pub created_at: u64,
    pub updated_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Works by status name; every status is present.
    pub work_counts: BTreeMap<String, usize>,
    pub works: Vec<WorkSummary>,
}

async fn get_request(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<RequestView>, ApiError> {
    let store = state.store();
    let req = store
        .find::<Request>(&id)?
        .ok_or_else(|| ApiError::not_found("request", &id))?;
    let works = store.list::<WorkRecord>(None, Some(&id))?;
    let mut work_counts: BTreeMap<String, usize> = dds_core::model::WorkStatus::ALL
        .iter()
        .map(|s| (s.name().to_string(), 0))
        .collect();
    for w in &works {
        *work_counts.entry(w.work.status.name().to_string()).or_default() += 1;
    }
    Ok(Json(RequestView {
        request_id: req.request_id,
        requester: req.requester,
        consumer: req.consumer,
        status: req.status,
        created_at: req.created_at,
        updated_at: req.updated_at,
        error: req.error.or_else(|| req.report.map(|r| r.to_string())),
        work_counts,
        works: works
            .into_iter()
            .map(|w| WorkSummary {
                work_id: w.work.work_id,
                template: w.work.template_name,
                status: w.work.status.name().to_string(),
                generation: w.work.generation,
                error: w.error,
            })
            .collect(),
    }))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageQuery {
    pub page_size: Option<usize>,
    pub cursor: Option<String>,
    pub status: Option<String>,
}

impl PageQuery {
    fn limit(&self) -> Result<usize, ApiError> {
        match self.page_size {
            None => Ok(DEFAULT_PAGE_SIZE),
            Some(n) if (1..=MAX_PAGE_SIZE).contains(&n) => Ok(n),
            Some(_) => Err(ApiError::bad_request(format!("page_size must be between 1 and {MAX_PAGE_SIZE}"))),
        }
    }
}

/// One page of a listing. `next_cursor` is the last id on this page, absent
/// on the final page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub next_cursor: Option<String>,
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(q)| q).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn page<T: Record>(store: &Store, key: &str, q: &PageQuery) -> Result<Page<T>, ApiError> {
    let limit = q.limit()?;
    // One extra row tells whether another page exists.
    let mut items = store.page_by::<T>(key, q.cursor.as_deref(), limit + 1)?;
    let next_cursor = if items.len() > limit {
        items.truncate(limit);
        items.last().map(|r| r.id().to_string())
    } else {
        None
    };
    Ok(Page { items, next_cursor })
}

async fn list_collections(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<PageQuery>, QueryRejection>,
) -> Result<Json<Page<Collection>>, ApiError> {
    let q = query(q)?;
    if q.status.is_some() {
        return Err(ApiError::bad_request("collections have no status filter"));
    }
    let store = state.store();
    if store.find::<Request>(&id)?.is_none() {
        return Err(ApiError::not_found("request", &id));
    }
    Ok(Json(page(store, &format!("request:{id}"), &q)?))
}

async fn list_contents(
    State(state): State<AppState>,
    Path(cid): Path<String>,
    q: Result<Query<PageQuery>, QueryRejection>,
) -> Result<Json<Page<Content>>, ApiError> {
    let q = query(q)?;
    let store = state.store();
    let coll = store
        .find::<Collection>(&cid)?
        .ok_or_else(|| ApiError::not_found("collection", &cid))?;
    let key = match &q.status {
        None => format!("owner:{cid}"),
        Some(s) => {
            let status = ContentStatus::parse(s).ok_or_else(|| {
                let names: Vec<_> = ContentStatus::ALL.iter().map(|s| s.name()).collect();
                ApiError::bad_request(format!("unknown content status `{s}`; expected one of {}", names.join(", ")))
            })?;
            let side = match coll.kind {
                CollectionKind::Input => "work",
                CollectionKind::Output => "out",
            };
            format!("{side}:{}:{}", coll.work_id, status.name())
        }
    };
    let mut p: Page<Content> = page(store, &key, &q)?;
    // The status index spans the Work; inputs of a Work live in exactly one
    // collection, but keep the filter honest anyway.
    p.items.retain(|c| c.collection_id == cid);
    Ok(Json(p))
}

async fn metrics(State(state): State<AppState>) -> Result<Response, ApiError> {
    let mut c = state.inner.counters.lock();
    c.refresh(state.store())?;
    let text = c.render(state.inner.stats.as_deref());
    Ok(([("content-type", "text/plain; version=0.0.4")], text).into_response())
}

fn hpo_error(e: HpoError) -> ApiError {
    let (status, code) = match &e {
        HpoError::UnknownPoint(_) => (StatusCode::NOT_FOUND, "unknown_point"),
        HpoError::ConflictingLoss(_) => (StatusCode::CONFLICT, "conflicting_loss"),
        HpoError::NotDispatched(_) => (StatusCode::CONFLICT, "not_dispatched"),
        HpoError::InvalidLoss(_) => (StatusCode::BAD_REQUEST, "invalid_loss"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "hpo"),
    };
    ApiError::new(status, code, e.to_string())
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FetchQuery {
    pub limit: Option<usize>,
}

async fn fetch_points(
    State(state): State<AppState>,
    Path(task): Path<String>,
    q: Result<Query<FetchQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let limit = query(q)?.limit.unwrap_or(1).min(MAX_PAGE_SIZE);
    let now = state.store().now();
    let points = state.hub()?.lock().fetch_points(&task, limit, now);
    Ok(Json(json!({"points": points})))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossReport {
    pub loss: f64,
}

async fn report_loss(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<LossReport>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(r) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let now = state.store().now();
    state.hub()?.lock().report_loss(&id, r.loss, now).map_err(hpo_error)?;
    Ok(Json(json!({"point_id": id})))
}

async fn report_failure(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let now = state.store().now();
    state.hub()?.lock().report_failure(&id, now).map_err(hpo_error)?;
    Ok(Json(json!({"point_id": id})))
}
