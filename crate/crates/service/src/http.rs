//! The `/v1` HTTP API.
//!
//! Handlers validate, then hand the work to [`crate::ops`] on the blocking
//! pool under the configured request timeout. Every error body has the shape
//! `{"error": {"kind": ..., "message": ...}}`.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use arbor_core::orchestrator::{export_trace, TraceFormat};
use arbor_core::perception::record_from_value;
use arbor_core::tree::{deserialize_model, serialize_model};
use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::ServiceConfig;
use crate::error::{Class, OpError};
use crate::ops::{self, TrainRequest, TrainingSummary, TranscriptSummary, VerdictView, WhatIfView};
use crate::store::{SessionStore, WhatIfLogEntry};

/// An error on its way to the client, with optional extra body fields.
#[derive(Debug)]
pub struct ApiError {
    pub error: OpError,
    pub extra: Option<Value>,
}

impl From<OpError> for ApiError {
    fn from(error: OpError) -> Self {
        Self { error, extra: None }
    }
}

pub fn status_of(class: Class) -> StatusCode {
    match class {
        Class::BadRequest => StatusCode::BAD_REQUEST,
        Class::NotFound => StatusCode::NOT_FOUND,
        Class::Unprocessable => StatusCode::UNPROCESSABLE_ENTITY,
        Class::TooLarge => StatusCode::PAYLOAD_TOO_LARGE,
        Class::Unauthorized => StatusCode::UNAUTHORIZED,
        Class::BadGateway => StatusCode::BAD_GATEWAY,
        Class::Timeout => StatusCode::GATEWAY_TIMEOUT,
        Class::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": {"kind": self.error.kind, "message": self.error.message}});
        if let (Value::Object(b), Some(Value::Object(extra))) = (&mut body, self.extra) {
            b.extend(extra);
        }
        (status_of(self.error.class), Json(body)).into_response()
    }
}

/// `Json` whose rejections use the service error shape.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(rej) => Err(json_rejection(rej).into()),
        }
    }
}

fn json_rejection(rej: JsonRejection) -> OpError {
    match rej.status() {
        StatusCode::PAYLOAD_TOO_LARGE => OpError::new(Class::TooLarge, "payload_too_large", rej.body_text()),
        _ => OpError::bad_request("malformed_request", rej.body_text()),
    }
}

struct Shared {
    store: RwLock<SessionStore>,
    config: ServiceConfig,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self::with_store(SessionStore::new(config.store), config)
    }

    pub fn with_store(store: SessionStore, config: ServiceConfig) -> Self {
        Self {
            shared: Arc::new(Shared {
                store: RwLock::new(store),
                config,
            }),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.shared.config
    }

    pub fn read<R>(&self, f: impl FnOnce(&SessionStore) -> R) -> R {
        f(&self.shared.store.read().expect("store lock poisoned"))
    }

    pub fn write<R>(&self, f: impl FnOnce(&mut SessionStore) -> R) -> R {
        f(&mut self.shared.store.write().expect("store lock poisoned"))
    }
}

/// Runs `f` on the blocking pool, giving up after the request timeout.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, OpError> + Send + 'static,
{
    let limit = Duration::from_millis(state.config().request_timeout_ms);
    match tokio::time::timeout(limit, tokio::task::spawn_blocking(f)).await {
        Err(_) => Err(OpError::new(Class::Timeout, "timeout", format!("request exceeded {} ms", limit.as_millis())).into()),
        Ok(Err(e)) => Err(OpError::new(Class::Internal, "internal", e.to_string()).into()),
        Ok(Ok(r)) => r.map_err(ApiError::from),
    }
}

pub fn router(state: AppState) -> Router {
    let cfg = state.config().clone();
    let api = Router::new()
        .route("/v1/train", post(train))
        .route("/v1/query", post(query))
        .route("/v1/whatif", post(whatif))
        .route("/v1/whatif/{episode_id}", get(whatif_log))
        .route("/v1/trace/{episode_id}", get(trace))
        .route("/v1/models", get(list_models).post(import_model))
        .route("/v1/models/{model_id}", get(get_model))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_key));
    Router::new()
        .route("/v1/healthz", get(healthz))
        .merge(api)
        .fallback(|| async { ApiError::from(OpError::new(Class::NotFound, "unknown_route", "no such endpoint")) })
        .layer(DefaultBodyLimit::max(cfg.max_body_bytes))
        .layer(cors(&cfg.cors_origins))
        .with_state(state)
}

fn cors(origins: &[String]) -> CorsLayer {
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION, header::HeaderName::from_static("x-api-key")])
}

async fn require_key(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let Some(expected) = &state.config().api_key else {
        return next.run(req).await;
    };
    let headers = req.headers();
    let given = headers
        .get("x-api-key")
        .and_then(|v| v.to_str().ok())
        .or_else(|| {
            headers
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "))
        });
    if given == Some(expected.as_str()) {
        next.run(req).await
    } else {
        ApiError::from(OpError::new(Class::Unauthorized, "unauthorized", "missing or wrong API key")).into_response()
    }
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    let (models, episodes) = state.read(|s| (s.model_count(), s.episode_count()));
    Json(json!({"status": "ok", "models": models, "episodes": episodes}))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelCreated {
    pub model_id: String,
    pub summary: TrainingSummary,
}

async fn train(State(state): State<AppState>, ApiJson(req): ApiJson<TrainRequest>) -> Result<Json<ModelCreated>, ApiError> {
    let max_rows = state.config().max_rows;
    if req.rows.as_ref().is_some_and(|r| r.len() > max_rows) {
        return Err(OpError::new(Class::TooLarge, "too_many_rows", format!("at most {max_rows} rows per request")).into());
    }
    let (model, summary) = blocking(&state, move || {
        let records = ops::request_records(&req)?;
        if records.len() > max_rows {
            return Err(OpError::new(Class::TooLarge, "too_many_rows", format!("at most {max_rows} rows per request")));
        }
        ops::train_model(&req, &records)
    })
    .await?;
    let model_id = state.write(|s| s.insert_model(model));
    Ok(Json(ModelCreated { model_id, summary }))
}

async fn import_model(State(state): State<AppState>, body: Bytes) -> Result<Json<ModelCreated>, ApiError> {
    let model = deserialize_model(&body).map_err(OpError::from)?;
    let summary = ops::summarize(&model);
    let model_id = state.write(|s| s.insert_model(model));
    Ok(Json(ModelCreated { model_id, summary }))
}

async fn list_models(State(state): State<AppState>) -> Json<Value> {
    let models: Vec<Value> = state
        .read(|s| s.models())
        .into_iter()
        .map(|(id, m)| json!({"model_id": id, "summary": ops::summarize(&m)}))
        .collect();
    Json(json!({ "models": models }))
}

async fn get_model(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let model = state.read(|s| s.model(&id)).ok_or_else(|| OpError::not_found("model", &id))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], serialize_model(&model)).into_response())
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub model_id: String,
    pub record: Value,
    /// Overrides applied to the configured episode defaults.
    #[serde(default)]
    pub settings: Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub episode_id: String,
    pub model_id: String,
    pub answer: Option<String>,
    pub verdict: Option<VerdictView>,
    pub transcript: TranscriptSummary,
}

async fn query(State(state): State<AppState>, ApiJson(req): ApiJson<QueryRequest>) -> Result<Json<QueryResponse>, ApiError> {
    let model = state
        .read(|s| s.model(&req.model_id))
        .ok_or_else(|| OpError::not_found("model", &req.model_id))?;
    let record = record_from_value(&req.record).map_err(OpError::from)?;
    let settings = ops::merge_settings(&state.config().episode_defaults, &req.settings)?;
    let m = Arc::clone(&model);
    let out = blocking(&state, move || ops::run_query(m, &record, &settings)).await?;
    let failure = ops::backend_failure(&out.transcript);
    let summary = ops::transcript_summary(&out.transcript);
    let answer = out.transcript.answer.clone();
    let episode_id = state.write(|s| s.insert_episode(out.transcript, &req.model_id, model));
    if let Some((kind, message)) = failure {
        return Err(ApiError {
            error: OpError::new(Class::BadGateway, kind, message),
            extra: Some(json!({"episode_id": episode_id, "transcript": summary})),
        });
    }
    Ok(Json(QueryResponse {
        episode_id,
        model_id: req.model_id,
        answer,
        verdict: out.verdict,
        transcript: summary,
    }))
}

#[derive(Debug, Deserialize)]
pub struct WhatIfRequest {
    pub episode_id: String,
    #[serde(default)]
    pub modifications: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub episode_id: String,
    #[serde(flatten)]
    pub view: WhatIfView,
    pub log_entry: WhatIfLogEntry,
    pub log_length: usize,
}

async fn whatif(State(state): State<AppState>, ApiJson(req): ApiJson<WhatIfRequest>) -> Result<Json<WhatIfResponse>, ApiError> {
    let (transcript, model) = state
        .read(|s| s.episode(&req.episode_id).map(|e| (Arc::clone(&e.transcript), Arc::clone(&e.model))))
        .ok_or_else(|| OpError::not_found("episode", &req.episode_id))?;
    if transcript.belief.latest_tree_verdict().is_none() {
        return Err(OpError::new(Class::Unprocessable, "no_tree_verdict", "the episode holds no tree verdict").into());
    }
    let mods = req.modifications.clone();
    let t = Arc::clone(&transcript);
    let view = blocking(&state, move || ops::run_whatif(&model, t.belief.input(), &mods)).await?;
    let transcript_digest = transcript.digest();
    let logged = state.read(|s| {
        let entry = s.episode(&req.episode_id)?;
        let mut log = entry.whatif_log.lock().expect("log lock poisoned");
        let e = WhatIfLogEntry {
            index: log.len(),
            modifications: req.modifications.clone(),
            before_outcome: view.result.before.outcome.clone(),
            after_outcome: view.result.after.outcome.clone(),
            divergence_index: view.divergence_index,
            transcript_digest,
            digest: String::new(),
        }
        .stamp();
        log.push(e.clone());
        Some((e, log.len()))
    });
    let (log_entry, log_length) = logged.ok_or_else(|| OpError::not_found("episode", &req.episode_id))?;
    Ok(Json(WhatIfResponse {
        episode_id: req.episode_id,
        view,
        log_entry,
        log_length,
    }))
}

async fn whatif_log(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let log = state
        .read(|s| s.episode(&id).map(|e| e.whatif_log.lock().expect("log lock poisoned").clone()))
        .ok_or_else(|| OpError::not_found("episode", &id))?;
    Ok(Json(json!({"episode_id": id, "log": log})))
}

#[derive(Debug, Deserialize)]
pub struct TraceParams {
    pub format: Option<String>,
}

async fn trace(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(p): Query<TraceParams>,
) -> Result<Response, ApiError> {
    let format: TraceFormat = p
        .format
        .as_deref()
        .unwrap_or("json")
        .parse()
        .map_err(|m: String| OpError::bad_request("unknown_format", m))?;
    let transcript = state
        .read(|s| s.episode(&id).map(|e| Arc::clone(&e.transcript)))
        .ok_or_else(|| OpError::not_found("episode", &id))?;
    let content_type = match format {
        TraceFormat::Json => "application/json",
        TraceFormat::Text => "text/plain; charset=utf-8",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], export_trace(&transcript, format)).into_response())
}

/// Binds, serves until Ctrl-C, then writes the snapshot if one is configured.
pub async fn serve(config: ServiceConfig) -> Result<(), OpError> {
    let store = match &config.snapshot_path {
        Some(p) if std::path::Path::new(p).exists() => {
            let text = std::fs::read_to_string(p).map_err(|e| OpError::io(p, e))?;
            let snap = serde_json::from_str(&text).map_err(|e| OpError::bad_request("invalid_snapshot", e.to_string()))?;
            SessionStore::restore(config.store, snap).map_err(|m| OpError::bad_request("invalid_snapshot", m))?
        }
        _ => SessionStore::new(config.store),
    };
    let state = AppState::with_store(store, config.clone());
    let listener = tokio::net::TcpListener::bind(&config.bind)
        .await
        .map_err(|e| OpError::io(&config.bind, e))?;
    eprintln!("listening on {}", listener.local_addr().map_err(|e| OpError::io(&config.bind, e))?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| OpError::io(&config.bind, e))?;
    if let Some(p) = &config.snapshot_path {
        let snap = state.read(|s| s.snapshot());
        std::fs::write(p, serde_json::to_vec(&snap).expect("snapshot serializes")).map_err(|e| OpError::io(p, e))?;
    }
    Ok(())
}
