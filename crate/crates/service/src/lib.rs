//! HTTP facade over the orchestrator: session lifecycle, requirement
//! submission, server-sent event streams, human feedback and reports.
//!
//! All session state lives in the orchestrator's on-disk records, so a
//! restarted server picks up where the previous one stopped.

mod error;
mod registry;
mod routes;

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::http::{HeaderValue, Method};
use axum::Router;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{watch, Semaphore};
use tower_http::cors::{AllowOrigin, CorsLayer};

use nsagent_core::orchestrator::{
    now_ms, AgentEvent, EventKind, EventSink, PipelineConfig, PipelineDeps, SessionStatus,
};

pub use error::{ApiError, ErrorCode};

use registry::Registry;

/// Builds the agents' dependencies for a session with the given config.
pub type DepsFactory = Arc<dyn Fn(&PipelineConfig) -> Result<PipelineDeps, String> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Root of the per-session directories.
    pub state_dir: PathBuf,
    /// Limit on sessions that have not finished yet.
    pub max_sessions: usize,
    /// Pipelines running at once.
    pub max_workers: usize,
    /// Origins allowed by CORS. Empty means same-origin only.
    pub cors_origins: Vec<String>,
    pub keep_alive: Duration,
    /// Defaults for new sessions; requirement submissions may override parts.
    pub pipeline: PipelineConfig,
}

impl ServiceConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        Self {
            state_dir: state_dir.into(),
            max_sessions: 64,
            max_workers: 4,
            cors_origins: Vec::new(),
            keep_alive: Duration::from_secs(15),
            pipeline: PipelineConfig::default(),
        }
    }
}

pub(crate) struct Inner {
    pub config: ServiceConfig,
    pub registry: Registry,
    pub factory: DepsFactory,
    pub workers: Arc<Semaphore>,
    pub shutdown: watch::Sender<bool>,
}

impl Inner {
    pub fn shutting_down(&self) -> bool {
        *self.shutdown.borrow()
    }
}

#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

const INTERRUPTED: &str = "interrupted by a service restart";

impl Service {
    /// Loads persisted sessions. Those that were mid-phase are marked failed,
    /// since their pipeline died with the previous process.
    pub fn open(config: ServiceConfig, factory: DepsFactory) -> std::io::Result<Self> {
        std::fs::create_dir_all(&config.state_dir)?;
        let registry = Registry::default();
        for slot in registry::restore(&config.state_dir, &registry)? {
            let mut state = slot.shared.snapshot();
            state.status = SessionStatus::Failed;
            state.failure_reason = Some(INTERRUPTED.into());
            let sequence = slot.shared.events.read().unwrap().last().map_or(1, |e| e.sequence + 1);
            let event = AgentEvent {
                session_id: state.session_id.clone(),
                sequence,
                kind: EventKind::SessionDone,
                payload: json!({ "status": state.status, "iterations": state.iterations.len(), "reason": INTERRUPTED }),
                timestamp_ms: now_ms(),
            };
            slot.dir.append_event(&event)?;
            slot.dir.append_snapshot(&state, None)?;
            slot.shared.emit(&event);
            EventSink::snapshot(&*slot.shared, &state);
            tracing::info!(session = %slot.id, "marked interrupted session failed");
        }
        let workers = Arc::new(Semaphore::new(config.max_workers));
        let (shutdown, _) = watch::channel(false);
        Ok(Self { inner: Arc::new(Inner { config, registry, factory, workers, shutdown }) })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn router(&self) -> Router {
        let mut router = routes::router(self.inner.clone());
        if !self.inner.config.cors_origins.is_empty() {
            let origins: Vec<HeaderValue> =
                self.inner.config.cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
            router = router.layer(
                CorsLayer::new()
                    .allow_origin(AllowOrigin::list(origins))
                    .allow_methods([Method::GET, Method::POST])
                    .allow_headers([axum::http::header::CONTENT_TYPE, axum::http::HeaderName::from_static("last-event-id")]),
            );
        }
        router
    }

    /// Rejects new work and ends open event streams.
    pub fn begin_shutdown(&self) {
        self.inner.shutdown.send_replace(true);
    }

    /// Waits until every running pipeline has stopped.
    pub async fn drain(&self) {
        let all = self.inner.config.max_workers as u32;
        if let Ok(permits) = self.inner.workers.acquire_many(all).await {
            drop(permits);
        }
    }

    /// Serves until `signal` resolves, then stops accepting work and waits for
    /// running pipelines to finish.
    pub async fn serve(self, listener: TcpListener, signal: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        let this = self.clone();
        axum::serve(listener, self.router())
            .with_graceful_shutdown(async move {
                signal.await;
                this.begin_shutdown();
            })
            .await?;
        self.drain().await;
        Ok(())
    }
}
