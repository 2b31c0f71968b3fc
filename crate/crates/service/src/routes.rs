use std::convert::Infallible;
use std::sync::atomic::Ordering;
use std::sync::{Arc, TryLockError};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{oneshot, watch};

use nsagent_core::orchestrator::{
    EventKind, OrchestratorError, PipelineConfig, Session, SessionReport, SessionState, SessionStatus,
};
use nsagent_core::toolchain::PayloadKind;

use crate::error::{ApiError, ErrorCode};
use crate::registry::{Shared, Slot};
use crate::{DepsFactory, Inner};

type App = State<Arc<Inner>>;
type ApiResult<T> = Result<T, ApiError>;

pub(crate) fn router(inner: Arc<Inner>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/requirements", post(submit_requirements))
        .route("/api/sessions/{id}/events", get(stream_events))
        .route("/api/sessions/{id}/feedback", post(post_feedback))
        .route("/api/sessions/{id}/report", get(get_report))
        .fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such route") })
        .with_state(inner)
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let code = match e {
            OrchestratorError::SessionFinished => ErrorCode::SessionFinished,
            OrchestratorError::NotAwaitingHuman => ErrorCode::NotAwaitingHuman,
            OrchestratorError::AlreadyStarted => ErrorCode::AlreadyStarted,
            OrchestratorError::IterationCapReached => ErrorCode::IterationCapReached,
            OrchestratorError::InvalidInput(_) => ErrorCode::InvalidRequest,
        };
        ApiError::new(code, e.to_string())
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(ErrorCode::Internal, e.to_string())
}

fn invalid(message: impl Into<String>) -> ApiError {
    ApiError::new(ErrorCode::InvalidRequest, message)
}

fn slot(inner: &Inner, id: &str) -> ApiResult<Arc<Slot>> {
    inner.registry.get(id).ok_or_else(|| ApiError::not_found(id))
}

fn handle(state: &SessionState) -> Value {
    json!({ "session_id": state.session_id, "created_at": state.created_ms, "status": state.status })
}

fn accepted(slot: &Slot) -> impl IntoResponse {
    let status = slot.shared.snapshot().status;
    (StatusCode::ACCEPTED, Json(json!({ "accepted": true, "session_id": slot.id, "status": status })))
}

async fn health(State(inner): App) -> Json<Value> {
    let running = inner.config.max_workers - inner.workers.available_permits();
    Json(json!({
        "status": if inner.shutting_down() { "draining" } else { "ok" },
        "sessions": inner.registry.len(),
        "running": running,
    }))
}

async fn create_session(State(inner): App) -> ApiResult<impl IntoResponse> {
    if inner.shutting_down() {
        return Err(ApiError::new(ErrorCode::ShuttingDown, "server is shutting down"));
    }
    if inner.registry.unfinished() >= inner.config.max_sessions {
        return Err(ApiError::new(
            ErrorCode::CapacityExceeded,
            format!("{} unfinished sessions is the limit", inner.config.max_sessions),
        ));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = nsagent_core::orchestrator::SessionDir::create(&inner.config.state_dir, &id).map_err(internal)?;
    let state = SessionState::new(&id, inner.config.pipeline.clone());
    dir.append_snapshot(&state, None).map_err(internal)?;
    let body = handle(&state);
    inner.registry.insert(Slot::new(id, dir, state, Vec::new()));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn list_sessions(State(inner): App) -> Json<Value> {
    let all: Vec<Value> = inner.registry.all().iter().map(|s| handle(&s.shared.snapshot())).collect();
    Json(json!({ "sessions": all }))
}

async fn get_session(State(inner): App, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = slot(&inner, &id)?;
    let state = slot.shared.snapshot();
    let last_sequence = *slot.shared.seq.borrow();
    let mut body = handle(&state);
    body["failure_reason"] = json!(state.failure_reason);
    body["iterations"] = json!(state.iterations.len());
    body["last_sequence"] = json!(last_sequence);
    body["config"] = json!({
        "max_iterations": state.config.max_iterations,
        "pause_for_human": state.config.pause_for_human,
        "model": state.config.agent.model,
        "payload_kind": state.config.agent.payload_kind,
    });
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequirementsBody {
    requirements: String,
    #[serde(default)]
    pause_for_human: bool,
    payload_kind: Option<PayloadKind>,
    model: Option<String>,
    max_iterations: Option<u32>,
}

enum Command {
    Start { requirements: String, config: PipelineConfig },
    Feedback { text: String },
    Approve { note: Option<String> },
}

async fn submit_requirements(
    State(inner): App,
    Path(id): Path<String>,
    body: Result<Json<RequirementsBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let slot = slot(&inner, &id)?;
    if slot.started.load(Ordering::SeqCst) {
        return Err(OrchestratorError::AlreadyStarted.into());
    }
    let Json(body) = body.map_err(|e| invalid(e.body_text()))?;
    if body.requirements.trim().is_empty() {
        return Err(invalid("requirements are empty"));
    }
    let mut config = slot.shared.snapshot().config;
    config.pause_for_human = body.pause_for_human;
    if let Some(kind) = body.payload_kind {
        config.agent.payload_kind = kind;
    }
    if let Some(model) = body.model.filter(|m| !m.trim().is_empty()) {
        config.agent.model = model;
    }
    if let Some(max) = body.max_iterations {
        if max == 0 {
            return Err(invalid("max_iterations must be at least 1"));
        }
        config.max_iterations = max;
    }
    if slot.started.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
        return Err(OrchestratorError::AlreadyStarted.into());
    }
    let cmd = Command::Start { requirements: body.requirements, config };
    if let Err(e) = dispatch(&inner, slot.clone(), cmd).await {
        slot.started.store(false, Ordering::SeqCst);
        return Err(e);
    }
    Ok(accepted(&slot))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackBody {
    #[serde(default)]
    text: String,
    #[serde(default)]
    approve: bool,
}

async fn post_feedback(
    State(inner): App,
    Path(id): Path<String>,
    body: Result<Json<FeedbackBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let slot = slot(&inner, &id)?;
    let Json(body) = body.map_err(|e| invalid(e.body_text()))?;
    let text = body.text.trim().to_string();
    if text.is_empty() && !body.approve {
        return Err(invalid("feedback needs text or approve"));
    }
    let status = slot.shared.snapshot().status;
    if status.is_finished() {
        return Err(OrchestratorError::SessionFinished.into());
    }
    if status == SessionStatus::AwaitingHuman {
        let cmd = if body.approve {
            Command::Approve { note: Some(text).filter(|t| !t.is_empty()) }
        } else {
            Command::Feedback { text }
        };
        dispatch(&inner, slot.clone(), cmd).await?;
        return Ok(accepted(&slot));
    }
    if body.approve {
        return Err(OrchestratorError::NotAwaitingHuman.into());
    }
    // Running: the next generation round picks it up.
    match slot.inbox.lock().unwrap().as_ref() {
        Some(inbox) if slot.started.load(Ordering::SeqCst) => inbox.push(text),
        _ => return Err(ApiError::new(ErrorCode::SessionNotStarted, "submit requirements first")),
    }
    Ok(accepted(&slot))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    #[serde(default)]
    normalize: bool,
}

async fn get_report(
    State(inner): App,
    Path(id): Path<String>,
    query: Result<Query<ReportQuery>, QueryRejection>,
) -> ApiResult<Json<SessionReport>> {
    let slot = slot(&inner, &id)?;
    let Query(query) = query.map_err(|e| invalid(e.body_text()))?;
    let state = slot.shared.snapshot();
    let state = if query.normalize { state.normalized() } else { state };
    Ok(Json(SessionReport::from_state(&state)))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    from_sequence: Option<u64>,
}

struct Cursor {
    shared: Arc<Shared>,
    next: u64,
    seq: watch::Receiver<u64>,
    stop: watch::Receiver<bool>,
    done: bool,
}

async fn stream_events(
    State(inner): App,
    Path(id): Path<String>,
    query: Result<Query<EventsQuery>, QueryRejection>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let slot = slot(&inner, &id)?;
    let Query(query) = query.map_err(|e| invalid(e.body_text()))?;
    let last_seen = match query.from_sequence {
        Some(n) => n,
        None => match headers.get("last-event-id") {
            Some(v) => v.to_str().ok().and_then(|s| s.trim().parse().ok()).ok_or_else(|| invalid("bad Last-Event-ID"))?,
            None => 0,
        },
    };
    let cursor = Cursor {
        shared: slot.shared.clone(),
        next: last_seen + 1,
        seq: slot.shared.seq.subscribe(),
        stop: inner.shutdown.subscribe(),
        done: false,
    };
    let stream = futures::stream::unfold(cursor, |mut c| async move {
        loop {
            if c.done || *c.stop.borrow() {
                return None;
            }
            c.seq.borrow_and_update();
            if let Some(ev) = c.shared.event(c.next) {
                c.next += 1;
                c.done = ev.kind == EventKind::SessionDone;
                let data = serde_json::to_string(&ev).expect("events serialize");
                let frame = Event::default().id(ev.sequence.to_string()).event(ev.kind.as_str()).data(data);
                return Some((Ok(frame), c));
            }
            if c.shared.snapshot().status.is_finished() {
                return None;
            }
            tokio::select! {
                r = c.seq.changed() => if r.is_err() { return None },
                _ = c.stop.changed() => {}
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(inner.config.keep_alive)))
}

/// Runs `cmd` on a blocking worker. Returns once the worker has checked the
/// command's preconditions, so callers see rejections synchronously while the
/// pipeline itself runs in the background.
async fn dispatch(inner: &Arc<Inner>, slot: Arc<Slot>, cmd: Command) -> ApiResult<()> {
    if inner.shutting_down() {
        return Err(ApiError::new(ErrorCode::ShuttingDown, "server is shutting down"));
    }
    let permit = inner
        .workers
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(ErrorCode::CapacityExceeded, "all pipeline workers are busy"))?;
    let (ack, reply) = oneshot::channel();
    let factory = inner.factory.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        run_command(&slot, &factory, cmd, ack);
    });
    reply.await.unwrap_or_else(|_| Err(internal("pipeline worker stopped")))
}

fn run_command(slot: &Slot, factory: &DepsFactory, cmd: Command, ack: oneshot::Sender<ApiResult<()>>) {
    let mut guard = match slot.session.try_lock() {
        Ok(g) => g,
        Err(TryLockError::Poisoned(p)) => p.into_inner(),
        Err(TryLockError::WouldBlock) => {
            // Another worker is driving this session right now.
            let res = match cmd {
                Command::Feedback { text } => match slot.inbox.lock().unwrap().as_ref() {
                    Some(inbox) => {
                        inbox.push(text);
                        Ok(())
                    }
                    None => Err(internal("session has no feedback queue")),
                },
                Command::Approve { .. } => Err(OrchestratorError::NotAwaitingHuman.into()),
                Command::Start { .. } => Err(OrchestratorError::AlreadyStarted.into()),
            };
            let _ = ack.send(res);
            return;
        }
    };
    if guard.is_none() {
        let state = slot.shared.snapshot();
        let events = slot.shared.events.read().unwrap().clone();
        let config = match &cmd {
            Command::Start { config, .. } => config,
            _ => &state.config,
        };
        let deps = match factory(config) {
            Ok(d) => d,
            Err(e) => {
                let _ = ack.send(Err(internal(format!("could not set up the agents: {e}"))));
                return;
            }
        };
        let session = Session::restore(state, events, deps).with_dir(slot.dir.clone()).with_sink(slot.shared.clone());
        *slot.inbox.lock().unwrap() = Some(session.inbox());
        *guard = Some(session);
    }
    let session = guard.as_mut().expect("materialized above");
    let state = session.state();
    let precheck = match &cmd {
        Command::Start { config, .. } => session.reconfigure(config.clone()),
        Command::Feedback { .. } if state.status.is_finished() => Err(OrchestratorError::SessionFinished),
        Command::Feedback { .. }
            if state.status == SessionStatus::AwaitingHuman
                && state.iterations.len() as u32 >= state.config.max_iterations =>
        {
            Err(OrchestratorError::IterationCapReached)
        }
        Command::Approve { .. } if state.status.is_finished() => Err(OrchestratorError::SessionFinished),
        Command::Approve { .. } if state.status != SessionStatus::AwaitingHuman => {
            Err(OrchestratorError::NotAwaitingHuman)
        }
        _ => Ok(()),
    };
    if let Err(e) = precheck {
        let _ = ack.send(Err(e.into()));
        return;
    }
    let _ = ack.send(Ok(()));
    let result = match cmd {
        Command::Start { requirements, .. } => session.start(&requirements),
        Command::Feedback { text } => session.apply_feedback(&text),
        Command::Approve { note } => session.approve(note.as_deref()),
    };
    if let Err(e) = result {
        tracing::warn!(session = %slot.id, error = %e, "command rejected after precheck");
    }
    // Feedback that arrived while the pipeline ran and it then paused.
    loop {
        let state = session.state();
        let before = state.iterations.len();
        if state.status != SessionStatus::AwaitingHuman
            || before as u32 >= state.config.max_iterations
            || session.inbox().is_empty()
        {
            break;
        }
        if session.resume().is_err() || session.state().iterations.len() == before {
            break;
        }
    }
}
