//! HTTP service for submitting, following and steering runs.
//!
//! | Method | Path | Purpose |
//! |---|---|---|
//! | POST | `/runs` | submit an instruction |
//! | GET | `/runs` | list runs |
//! | GET | `/runs/{id}` | full run record |
//! | GET | `/runs/{id}/events` | event stream (replay, then live) |
//! | GET | `/runs/{id}/dag` | futures and plan steps as a graph |
//! | POST | `/runs/{id}/escalations/{eid}` | answer a pending escalation |

mod dag;
mod runs;

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use fcflow_core::agents::{
    escalation_channel, ExecutorOptions, HumanDecision, PlanError, PlanStatus, ReportObserver,
};
use fcflow_core::conversation::{run_instruction, ConversationOptions, DEFAULT_BUDGET};
use fcflow_core::engine::{generate_run_id, Engine, EngineConfig, FutureObserver, FutureState};
use fcflow_core::{Backend, Registry};
use futures::stream::{self, Stream, StreamExt};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use dag::{Dag, DagEdge, DagNode};
pub use runs::{
    AnswerError, EscalationView, RunEvent, RunHandle, RunMode, RunRecord, RunStatus, RunSummary, SequencedEvent,
};

/// Environment variable holding the optional shared access token.
pub const TOKEN_ENV: &str = "FCFLOW_SERVICE_TOKEN";
/// Environment variable holding the listen address.
pub const ADDR_ENV: &str = "FCFLOW_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// Builds a fresh backend for every run.
pub type BackendFactory = Arc<dyn Fn() -> Result<Arc<dyn Backend>, String> + Send + Sync>;

#[derive(Clone)]
pub struct ServiceConfig {
    pub runs_root: PathBuf,
    pub backend: BackendFactory,
    pub token: Option<String>,
    pub budget: u64,
    pub preamble: String,
    pub initial_counter: u64,
    pub executor: ExecutorOptions,
    /// How long a finished conversation waits for its futures to settle.
    pub settle_timeout: Duration,
}

impl ServiceConfig {
    pub fn new(runs_root: impl Into<PathBuf>, backend: BackendFactory) -> Self {
        Self {
            runs_root: runs_root.into(),
            backend,
            token: None,
            budget: DEFAULT_BUDGET,
            preamble: fcflow_core::default_preamble().to_string(),
            initial_counter: 0,
            executor: ExecutorOptions::default(),
            settle_timeout: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("instruction must not be empty")]
    EmptyInstruction,
    #[error("unknown manifest `{0}`")]
    UnknownManifest(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("cannot create backend: {0}")]
    Backend(String),
    #[error("cannot create run: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub instruction: String,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default)]
    pub manifest: Option<String>,
}

fn default_mode() -> RunMode {
    RunMode::DirectLoop
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Submitted {
    pub run_id: String,
}

struct Inner {
    config: ServiceConfig,
    manifests: IndexMap<String, Arc<Registry>>,
    runs: RwLock<IndexMap<String, Arc<RunHandle>>>,
}

/// The service: loaded manifests plus every run started since launch.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

impl Service {
    /// `manifests` must be non-empty; the first one is the default.
    pub fn new(config: ServiceConfig, manifests: Vec<Arc<Registry>>) -> Self {
        let manifests = manifests.into_iter().map(|r| (r.name().to_string(), r)).collect();
        Self {
            inner: Arc::new(Inner {
                config,
                manifests,
                runs: RwLock::new(IndexMap::new()),
            }),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn manifest_names(&self) -> Vec<String> {
        self.inner.manifests.keys().cloned().collect()
    }

    pub fn run(&self, run_id: &str) -> Option<Arc<RunHandle>> {
        self.inner
            .runs
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(run_id)
            .cloned()
    }

    pub fn runs(&self) -> Vec<Arc<RunHandle>> {
        self.inner
            .runs
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect()
    }

    /// Starts a run in the background and returns its id.
    pub fn submit(&self, request: SubmitRequest) -> Result<String, SubmitError> {
        let instruction = request.instruction.trim();
        if instruction.is_empty() {
            return Err(SubmitError::EmptyInstruction);
        }
        let registry = match &request.manifest {
            Some(name) => self.inner.manifests.get(name),
            None => self.inner.manifests.values().next(),
        }
        .cloned()
        .ok_or_else(|| SubmitError::UnknownManifest(request.manifest.clone().unwrap_or_default()))?;
        let backend = (self.inner.config.backend)().map_err(SubmitError::Backend)?;

        let run_id = generate_run_id();
        let record = RunRecord {
            run_id: run_id.clone(),
            instruction: request.instruction.clone(),
            mode: request.mode,
            manifest: registry.name().to_string(),
            status: RunStatus::Running,
            created_at: Utc::now(),
            finished_at: None,
            transcript: None,
            planning: None,
            plan_report: None,
            error: None,
        };
        let handle = Arc::new(
            RunHandle::create(&self.inner.config.runs_root, record).map_err(|e| SubmitError::Io(e.to_string()))?,
        );
        handle.push(RunEvent::RunStarted {
            run_id: run_id.clone(),
            instruction: request.instruction.clone(),
            mode: request.mode,
            manifest: registry.name().to_string(),
        });
        self.inner
            .runs
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(run_id.clone(), handle.clone());

        let config = self.inner.config.clone();
        let instruction = request.instruction;
        tokio::spawn(async move {
            drive_run(config, registry, backend, handle, instruction, request.mode).await;
        });
        Ok(run_id)
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/runs", post(submit_run).get(list_runs))
            .route("/runs/{id}", get(get_run))
            .route("/runs/{id}/events", get(stream_events))
            .route("/runs/{id}/dag", get(get_dag))
            .route("/runs/{id}/escalations/{eid}", post(answer_escalation))
            .layer(middleware::from_fn_with_state(self.clone(), require_token))
            .with_state(self.clone())
    }
}

async fn drive_run(
    config: ServiceConfig,
    registry: Arc<Registry>,
    backend: Arc<dyn Backend>,
    handle: Arc<RunHandle>,
    instruction: String,
    mode: RunMode,
) {
    let run_id = handle.record().run_id;
    let observer_handle = handle.clone();
    let observer: FutureObserver = Arc::new(move |t| observer_handle.push(RunEvent::Future(t.clone())));
    let engine_config =
        EngineConfig::new(&config.runs_root, &run_id).with_initial_counter(config.initial_counter);
    let engine = match Engine::with_observer(registry, engine_config, Some(observer)) {
        Ok(engine) => engine,
        Err(err) => {
            handle.finish(|r| {
                r.status = RunStatus::Failed;
                r.error = Some(err.to_string());
            });
            return;
        }
    };
    handle.set_engine(engine.clone());
    match mode {
        RunMode::DirectLoop => drive_loop(&config, &engine, backend, &handle, &instruction).await,
        RunMode::Planned => drive_planned(&config, &engine, backend, &handle, &instruction).await,
    }
    tracing::info!(%run_id, status = ?handle.record().status, "run finished");
}

/// Waits for every future and names the first failed one, if any.
async fn settle(engine: &Engine, timeout: Duration) -> Result<(), String> {
    let futures = engine.await_all(timeout).await.map_err(|e| e.to_string())?;
    match futures.iter().find(|f| f.state == FutureState::Failed) {
        Some(f) => Err(format!("future {} failed", f.id)),
        None => Ok(()),
    }
}

async fn drive_loop(
    config: &ServiceConfig,
    engine: &Engine,
    backend: Arc<dyn Backend>,
    handle: &Arc<RunHandle>,
    instruction: &str,
) {
    let events = handle.clone();
    let options = ConversationOptions {
        observer: Some(Arc::new(move |e| events.push(RunEvent::Transcript(e.clone())))),
        ..ConversationOptions::default()
    };
    let result = run_instruction(&config.preamble, instruction, engine, backend.as_ref(), config.budget, options).await;
    let transcript = match result {
        Ok(transcript) => transcript,
        Err(err) => {
            handle.finish(|r| {
                r.status = RunStatus::Failed;
                r.error = Some(err.to_string());
            });
            return;
        }
    };
    let settled = settle(engine, config.settle_timeout).await;
    handle.finish(|r| {
        r.status = match (transcript.abort_reason(), &settled) {
            (Some(reason), _) => {
                r.error = Some(format!("conversation aborted: {reason}"));
                RunStatus::Aborted
            }
            (None, Err(err)) => {
                r.error = Some(err.clone());
                RunStatus::Failed
            }
            (None, Ok(())) => RunStatus::Succeeded,
        };
        r.transcript = Some(transcript);
    });
}

async fn drive_planned(
    config: &ServiceConfig,
    engine: &Engine,
    backend: Arc<dyn Backend>,
    handle: &Arc<RunHandle>,
    instruction: &str,
) {
    let (channel, mut escalations) = escalation_channel();
    let forwarder = {
        let handle = handle.clone();
        tokio::spawn(async move {
            while let Some(pending) = escalations.recv().await {
                handle.add_escalation(pending);
            }
        })
    };
    let events = handle.clone();
    let observer: ReportObserver = Arc::new(move |entry| events.push(RunEvent::Plan(entry.clone())));
    let plan_events = handle.clone();
    let result = async {
        let planning = fcflow_core::agents::make_plan_default(instruction, engine.registry(), backend.as_ref()).await?;
        plan_events.push(RunEvent::PlanReady {
            plan: planning.plan.clone(),
        });
        let report = fcflow_core::agents::execute_plan(
            planning.plan.clone(),
            engine,
            backend.clone(),
            &channel,
            config.executor.clone(),
            Some(observer),
        )
        .await;
        Ok::<_, PlanError>(fcflow_core::agents::PlannedRun { planning, report })
    }
    .await;
    drop(channel);
    let _ = forwarder.await;
    match result {
        Ok(run) => handle.finish(|r| {
            r.status = match &run.report.status {
                PlanStatus::Completed => RunStatus::Succeeded,
                PlanStatus::Aborted { reason, .. } => {
                    r.error = Some(reason.clone());
                    RunStatus::Aborted
                }
            };
            r.planning = Some(run.planning);
            r.plan_report = Some(run.report);
        }),
        Err(err) => handle.finish(|r| {
            r.status = RunStatus::Failed;
            r.error = Some(err.to_string());
        }),
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

#[derive(Debug, Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

async fn require_token(
    State(service): State<Service>,
    Query(query): Query<TokenQuery>,
    request: Request,
    next: Next,
) -> Response {
    let Some(expected) = &service.inner.config.token else {
        return next.run(request).await;
    };
    let bearer = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if bearer == Some(expected.as_str()) || query.token.as_deref() == Some(expected.as_str()) {
        next.run(request).await
    } else {
        error(StatusCode::UNAUTHORIZED, "missing or invalid token")
    }
}

async fn submit_run(State(service): State<Service>, body: Bytes) -> Response {
    let request: SubmitRequest = match serde_json::from_slice(&body) {
        Ok(request) => request,
        Err(err) => return error(StatusCode::BAD_REQUEST, SubmitError::Invalid(err.to_string()).to_string()),
    };
    match service.submit(request) {
        Ok(run_id) => (StatusCode::ACCEPTED, Json(Submitted { run_id })).into_response(),
        Err(err @ SubmitError::UnknownManifest(_)) => error(StatusCode::NOT_FOUND, err.to_string()),
        Err(err @ (SubmitError::Backend(_) | SubmitError::Io(_))) => {
            error(StatusCode::INTERNAL_SERVER_ERROR, err.to_string())
        }
        Err(err) => error(StatusCode::BAD_REQUEST, err.to_string()),
    }
}

async fn list_runs(State(service): State<Service>) -> Json<Vec<RunSummary>> {
    Json(service.runs().iter().map(|h| h.summary()).collect())
}

#[derive(Debug, Serialize)]
struct RunView {
    #[serde(flatten)]
    record: RunRecord,
    pending_escalations: Vec<EscalationView>,
}

fn not_found(run_id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("unknown run `{run_id}`"))
}

async fn get_run(State(service): State<Service>, Path(run_id): Path<String>) -> Response {
    match service.run(&run_id) {
        Some(handle) => Json(RunView {
            record: handle.record(),
            pending_escalations: handle.pending_escalations(),
        })
        .into_response(),
        None => not_found(&run_id),
    }
}

fn sse_event(event: &SequencedEvent) -> Event {
    Event::default()
        .event(event.event.name())
        .id(event.seq.to_string())
        .data(serde_json::to_string(event).expect("events serialize"))
}

/// Replays the run's events, then follows it live until it finishes.
pub fn event_stream(handle: &RunHandle) -> impl Stream<Item = SequencedEvent> + Send + 'static {
    let (replay, live) = handle.subscribe();
    let live = stream::unfold(live, |rx| async move {
        let mut rx = rx?;
        let event = rx.recv().await?;
        Some((event, Some(rx)))
    });
    stream::iter(replay).chain(live)
}

async fn stream_events(State(service): State<Service>, Path(run_id): Path<String>) -> Response {
    let Some(handle) = service.run(&run_id) else {
        return not_found(&run_id);
    };
    let events = event_stream(&handle).map(|e| Ok::<_, Infallible>(sse_event(&e)));
    Sse::new(events).keep_alive(KeepAlive::default()).into_response()
}

async fn get_dag(State(service): State<Service>, Path(run_id): Path<String>) -> Response {
    match service.run(&run_id) {
        Some(handle) => Json(Dag::build(&handle)).into_response(),
        None => not_found(&run_id),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Acknowledgement {
    pub escalation_id: String,
    pub accepted: bool,
}

async fn answer_escalation(
    State(service): State<Service>,
    Path((run_id, escalation_id)): Path<(String, String)>,
    body: Bytes,
) -> Response {
    let Some(handle) = service.run(&run_id) else {
        return not_found(&run_id);
    };
    let decision: HumanDecision = match serde_json::from_slice(&body) {
        Ok(decision) => decision,
        Err(err) => return error(StatusCode::BAD_REQUEST, format!("invalid decision: {err}")),
    };
    match handle.answer(&escalation_id, decision) {
        Ok(()) => Json(Acknowledgement {
            escalation_id,
            accepted: true,
        })
        .into_response(),
        Err(err @ AnswerError::NotPending(_)) => error(StatusCode::NOT_FOUND, err.to_string()),
        Err(err @ AnswerError::AlreadyAnswered(_)) => error(StatusCode::CONFLICT, err.to_string()),
    }
}

/// Serves until the listener fails or the process ends.
pub async fn serve(listener: tokio::net::TcpListener, service: Service) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "listening");
    axum::serve(listener, service.router()).await
}
