//! HTTP service: submit pipeline runs and follow their events live over SSE or
//! WebSocket. Every run keeps a replay log, so a client that reconnects with
//! `from_seq` (or `Last-Event-ID`) resumes without gaps or duplicates.

mod log;

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::Stream;
use groundloop_core::config::BackendSource;
use groundloop_core::orchestrator::{run_pipeline, EventKind, PipelineDeps, RunConfig, RunResult};
use groundloop_core::retrieval::EpisodicMemory;
use groundloop_core::sandbox::Sandbox;
use groundloop_core::types::{ContextFile, RelPath, Task};
use serde::Deserialize;
use serde_json::{json, Value};

pub use crate::log::{LogSink, RunEvent, RunLog, Subscription, TokenFilter};

/// How long a subscriber may leave its buffer full before it is disconnected.
pub const DEFAULT_STALL: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("server error: {0}")]
    Serve(String),
}

/// Everything a run needs, shared by all requests.
pub struct ServiceState {
    pub config: RunConfig,
    pub backends: BackendSource,
    pub sandbox: Sandbox,
    pub memory: Option<Arc<EpisodicMemory>>,
    pub max_active_runs: usize,
    pub subscriber_buffer: usize,
    pub stall: Duration,
    runs: RwLock<HashMap<String, Arc<RunEntry>>>,
    active: AtomicUsize,
    next_id: AtomicU64,
}

struct RunEntry {
    log: Arc<RunLog>,
    result: Mutex<Option<RunResult>>,
}

impl ServiceState {
    pub fn new(config: RunConfig, backends: BackendSource, sandbox: Sandbox, memory: Option<Arc<EpisodicMemory>>) -> Self {
        ServiceState {
            config,
            backends,
            sandbox,
            memory,
            max_active_runs: 4,
            subscriber_buffer: 1024,
            stall: DEFAULT_STALL,
            runs: RwLock::new(HashMap::new()),
            active: AtomicUsize::new(0),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn active_runs(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    fn entry(&self, id: &str) -> Option<Arc<RunEntry>> {
        self.runs.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    pub fn log(&self, id: &str) -> Option<Arc<RunLog>> {
        self.entry(id).map(|e| Arc::clone(&e.log))
    }

    /// Registers the run and starts it on the blocking pool.
    fn start(self: &Arc<Self>, task: Task) -> Result<String, (StatusCode, Value)> {
        let reserved = self
            .active
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < self.max_active_runs).then_some(n + 1));
        if reserved.is_err() {
            return Err((
                StatusCode::TOO_MANY_REQUESTS,
                json!({"error": format!("{} runs already active", self.max_active_runs)}),
            ));
        }
        let id = format!("run-{:06}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let task = if task.id.0.is_empty() {
            Task { id: groundloop_core::types::TaskId(id.clone()), ..task }
        } else {
            task
        };
        let entry = Arc::new(RunEntry {
            log: RunLog::new(&id),
            result: Mutex::new(None),
        });
        self.runs.write().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), Arc::clone(&entry));
        let state = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let sink = LogSink::new(Arc::clone(&entry.log));
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                let backend = state.backends.backend(&task.id.0).map_err(|e| e.to_string())?;
                let deps = PipelineDeps {
                    backend: backend.as_ref(),
                    sandbox: &state.sandbox,
                    memory: state.memory.as_deref(),
                    repo: None,
                    events: &sink,
                };
                Ok::<_, String>(run_pipeline(&task, &state.config, &deps))
            }));
            let failure = match outcome {
                Ok(Ok(result)) => {
                    *entry.result.lock().unwrap_or_else(|e| e.into_inner()) = Some(result);
                    None
                }
                Ok(Err(e)) => Some(e),
                Err(_) => Some("pipeline panicked".to_string()),
            };
            if let Some(message) = failure {
                entry.log.push(EventKind::Error, json!({"message": message}));
            }
            state.active.fetch_sub(1, Ordering::SeqCst);
            if !sink.release() {
                entry.log.push(EventKind::RunCompleted, json!({"verdict": null, "failure": "run aborted"}));
            }
        });
        Ok(id)
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/runs", post(submit))
        .route("/runs/{id}", get(result))
        .route("/runs/{id}/events", get(events))
        .route("/runs/{id}/ws", get(websocket))
        .with_state(state)
}

pub async fn serve(state: Arc<ServiceState>, addr: &str) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ServiceError::Bind {
        addr: addr.to_string(),
        message: e.to_string(),
    })?;
    serve_on(state, listener).await
}

pub async fn serve_on(state: Arc<ServiceState>, listener: tokio::net::TcpListener) -> Result<(), ServiceError> {
    ::log::info!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    axum::serve(listener, router(state)).await.map_err(|e| ServiceError::Serve(e.to_string()))
}

fn error(status: StatusCode, body: Value) -> Response {
    (status, Json(body)).into_response()
}

async fn healthz(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "active_runs": state.active_runs(),
        "executor": state.sandbox.executor_name(),
    }))
}

fn invalid(field: &str, message: &str) -> (StatusCode, Value) {
    (
        StatusCode::BAD_REQUEST,
        json!({"error": format!("{field}: {message}"), "field": field}),
    )
}

/// Validates a submitted task, naming the offending field.
pub fn parse_task(body: &Value) -> Result<Task, (StatusCode, Value)> {
    let obj = body.as_object().ok_or_else(|| invalid("$", "expected a JSON object"))?;
    let id = match obj.get("id") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(invalid("id", "expected a string")),
    };
    let description = match obj.get("description") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(invalid("description", "must not be empty")),
        Some(_) => return Err(invalid("description", "expected a string")),
        None => return Err(invalid("description", "required")),
    };
    let mut files = Vec::new();
    match obj.get("context_files") {
        None | Some(Value::Null) => {}
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                let field = |name: &str| format!("context_files[{i}].{name}");
                let path = item["path"]
                    .as_str()
                    .ok_or_else(|| invalid(&field("path"), "expected a string"))?;
                let path = RelPath::new(path).map_err(|e| invalid(&field("path"), &e.to_string()))?;
                let content = item["content"]
                    .as_str()
                    .ok_or_else(|| invalid(&field("content"), "expected a string"))?;
                files.push(ContextFile {
                    path,
                    content: content.to_string(),
                });
            }
        }
        Some(_) => return Err(invalid("context_files", "expected an array")),
    }
    Task::new(id, description, files).map_err(|e| invalid("context_files", &e.to_string()))
}

async fn submit(State(state): State<Arc<ServiceState>>, body: axum::body::Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, json!({"error": format!("invalid JSON: {e}"), "field": "$"})),
    };
    let task = match parse_task(&value) {
        Ok(t) => t,
        Err((status, body)) => return error(status, body),
    };
    match state.start(task) {
        Ok(id) => (
            StatusCode::ACCEPTED,
            Json(json!({"id": id, "events": format!("/runs/{id}/events"), "result": format!("/runs/{id}")})),
        )
            .into_response(),
        Err((status, body)) => error(status, body),
    }
}

async fn result(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Response {
    let Some(entry) = state.entry(&id) else {
        return error(StatusCode::NOT_FOUND, json!({"error": format!("unknown run {id}")}));
    };
    if !entry.log.is_complete() {
        return error(
            StatusCode::CONFLICT,
            json!({"error": "run still active", "seq": entry.log.len().saturating_sub(1)}),
        );
    }
    let body = entry.result.lock().unwrap_or_else(|e| e.into_inner()).as_ref().map(RunResult::canonical_json);
    match body {
        Some(json) => ([("content-type", "application/json")], json).into_response(),
        None => error(StatusCode::INTERNAL_SERVER_ERROR, json!({"error": "run aborted without a result"})),
    }
}

#[derive(Debug, Deserialize)]
pub struct StreamParams {
    pub from_seq: Option<u64>,
    pub tokens: Option<String>,
}

fn open_stream(
    state: &ServiceState,
    id: &str,
    params: &StreamParams,
    headers: &HeaderMap,
) -> Result<Subscription, Response> {
    let log = state
        .log(id)
        .ok_or_else(|| error(StatusCode::NOT_FOUND, json!({"error": format!("unknown run {id}")})))?;
    // Last-Event-ID is the last event the client saw; resume after it.
    let last_seen = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|s| s.trim().parse::<u64>().ok());
    let from = params.from_seq.or(last_seen.map(|s| s + 1)).unwrap_or(0);
    let filter = match &params.tokens {
        Some(t) => TokenFilter::parse(t).map_err(|e| error(StatusCode::BAD_REQUEST, json!({"error": e, "field": "tokens"})))?,
        None => TokenFilter::default(),
    };
    Ok(log.subscribe(from, filter, state.subscriber_buffer, state.stall))
}

async fn events(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    Query(params): Query<StreamParams>,
    headers: HeaderMap,
) -> Response {
    match open_stream(&state, &id, &params, &headers) {
        Ok(sub) => Sse::new(sse_stream(sub)).keep_alive(KeepAlive::default()).into_response(),
        Err(r) => r,
    }
}

fn sse_stream(sub: Subscription) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold(Some(sub), |state| async move {
        let mut sub = state?;
        match sub.rx.recv().await {
            Some(e) => {
                let event = Event::default()
                    .id(e.seq.to_string())
                    .event(e.kind.as_str())
                    .data(serde_json::to_string(&e).expect("event serializes"));
                Some((Ok(event), Some(sub)))
            }
            None => sub
                .lagged_at()
                .map(|seq| (Ok(Event::default().comment(format!("lagged; resume with from_seq={seq}"))), None)),
        }
    })
}

async fn websocket(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    Query(params): Query<StreamParams>,
    headers: HeaderMap,
    upgrade: WebSocketUpgrade,
) -> Response {
    match open_stream(&state, &id, &params, &headers) {
        Ok(sub) => upgrade.on_upgrade(move |socket| pump_websocket(socket, sub)),
        Err(r) => r,
    }
}

async fn pump_websocket(mut socket: WebSocket, mut sub: Subscription) {
    while let Some(e) = sub.rx.recv().await {
        let text = serde_json::to_string(&e).expect("event serializes");
        if socket.send(Message::Text(text.into())).await.is_err() {
            return;
        }
    }
    let frame = match sub.lagged_at() {
        Some(seq) => CloseFrame {
            code: 1013,
            reason: format!("lagged; resume with from_seq={seq}").into(),
        },
        None => CloseFrame {
            code: 1000,
            reason: "run completed".into(),
        },
    };
    let _ = socket.send(Message::Close(Some(frame))).await;
}
