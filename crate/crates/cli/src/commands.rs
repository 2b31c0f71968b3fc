use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use serde_json::{json, Value};

use nsagent_core::agents::PromptLibrary;
use nsagent_core::eval_harness::{compute_table_metrics, run_benchmark, BenchmarkOptions, EvalError, Scenario};
use nsagent_core::exec::Execution;
use nsagent_core::knowledge_store::{ingest_documents, load_directory, ChunkingConfig, VectorStore};
use nsagent_core::llm_gateway::{ChatProvider, Embedder, HashEmbedder, OpenAiClient, ScriptedProvider, Transcript};
use nsagent_core::orchestrator::{
    PipelineConfig, PipelineDeps, Session, SessionDir, SessionReport, SessionStatus,
};
use nsagent_core::toolchain::{FakeSimulator, PayloadKind, Toolchain};
use nsagent_service::{Service, ServiceConfig};

use crate::config::{CliConfig, EmbedderKind, OutputFormat, ENV_API_KEY};
use crate::{BackendArgs, CliError, EvalArgs, Exit, IngestArgs, Outcome, RunArgs, ServeArgs};

type CliResult<T> = Result<T, CliError>;

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok()
}

/// Everything needed to build `PipelineDeps` for any number of sessions.
#[derive(Clone)]
struct Backend {
    transcript: Option<Transcript>,
    client: Option<Arc<OpenAiClient>>,
    embedder: Arc<dyn Embedder>,
    store: Option<Arc<VectorStore>>,
    toolchain: nsagent_core::toolchain::ToolchainConfig,
    prompts: Arc<PromptLibrary>,
}

impl Backend {
    fn new(config: &CliConfig, args: &BackendArgs) -> CliResult<Self> {
        let transcript = match &args.transcript {
            Some(p) => Some(Transcript::load(p).map_err(|e| CliError::usage(e.to_string()))?),
            None => None,
        };
        let wants_client = transcript.is_none() || config.embedding.kind == EmbedderKind::Provider;
        let client = if wants_client {
            let p = config.provider(env);
            if p.api_key.is_empty() {
                return Err(CliError::usage(format!(
                    "no API key: set {ENV_API_KEY}, or pass --transcript to replay recorded replies"
                )));
            }
            Some(Arc::new(OpenAiClient::new(p).map_err(|e| CliError::usage(e.to_string()))?))
        } else {
            None
        };
        let store_path = args.store.clone().or_else(|| config.store.clone().filter(|p| p.is_file()));
        let store = match store_path {
            Some(p) => Some(Arc::new(
                VectorStore::load(&p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
            )),
            None => None,
        };
        let embedder = embedder(config, client.clone(), store.as_ref().and_then(|s| s.dimension()))?;
        let mut toolchain = config.toolchain();
        if args.fake_sim {
            toolchain.fake = Some(toolchain.fake.unwrap_or_else(|| FakeSimulator::with_sleep(0.0)));
        }
        let prompts = match &config.prompts_dir {
            Some(dir) => PromptLibrary::with_overrides(dir).map_err(|e| CliError::usage(e.to_string()))?,
            None => PromptLibrary::builtin(),
        };
        Ok(Self { transcript, client, embedder, store, toolchain, prompts: Arc::new(prompts) })
    }

    /// Fresh deps for one session; a transcript replays from its start.
    fn deps(&self) -> Result<PipelineDeps, String> {
        let provider: Arc<dyn ChatProvider> = match (&self.transcript, &self.client) {
            (Some(t), _) => Arc::new(ScriptedProvider::new(t.clone()).map_err(|e| e.to_string())?),
            (None, Some(c)) => c.clone(),
            (None, None) => return Err("no chat provider configured".into()),
        };
        Ok(PipelineDeps {
            provider,
            embedder: self.embedder.clone(),
            store: self.store.clone(),
            toolchain: Arc::new(Toolchain::new(self.toolchain.clone())),
            prompts: self.prompts.clone(),
        })
    }
}

fn embedder(
    config: &CliConfig,
    client: Option<Arc<OpenAiClient>>,
    store_dimension: Option<usize>,
) -> CliResult<Arc<dyn Embedder>> {
    match config.embedding.kind {
        EmbedderKind::Hash => Ok(Arc::new(HashEmbedder::new(store_dimension.unwrap_or(config.embedding.dimension)))),
        EmbedderKind::Provider => match client {
            Some(c) => Ok(c),
            None => {
                let p = config.provider(env);
                Ok(Arc::new(OpenAiClient::new(p).map_err(|e| CliError::usage(e.to_string()))?))
            }
        },
    }
}

pub fn ingest(config: &CliConfig, args: IngestArgs) -> CliResult<Outcome> {
    let store_path = args
        .store
        .or_else(|| config.store.clone())
        .ok_or_else(|| CliError::usage("no store path: pass --store or set `store` in the config"))?;
    let docs = load_directory(&args.dir).map_err(|e| CliError::usage(e.to_string()))?;
    let embedder = embedder(config, None, None)?;
    let mut store = VectorStore::new();
    let report = ingest_documents(&docs, &*embedder, &mut store, ChunkingConfig::default())
        .map_err(|e| CliError::failed(e.to_string()))?;
    if let Some(parent) = store_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::usage(format!("{}: {e}", parent.display())))?;
    }
    store.persist(&store_path).map_err(|e| CliError::usage(format!("{}: {e}", store_path.display())))?;
    Ok(Outcome {
        exit: Exit::Ok,
        human: format!(
            "ingested {} documents into {} chunks in {:.3} s\nstore: {}",
            report.docs,
            report.chunks,
            report.elapsed,
            store_path.display()
        ),
        json: json!({ "docs": report.docs, "chunks": report.chunks, "elapsed": report.elapsed, "store": store_path }),
    })
}

fn read_requirements(args: &RunArgs) -> CliResult<String> {
    match (&args.requirements, &args.file) {
        (_, Some(path)) => std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display()))),
        (Some(text), None) => Ok(text.clone()),
        (None, None) => Err(CliError::usage("no requirements given")),
    }
}

fn session_id() -> String {
    let ms = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis());
    format!("run-{ms}-{}", std::process::id())
}

pub fn run(config: &CliConfig, args: RunArgs) -> CliResult<Outcome> {
    let requirements = read_requirements(&args)?;
    if requirements.trim().is_empty() {
        return Err(CliError::usage("requirements are empty"));
    }
    let mut pipeline: PipelineConfig = config.pipeline(args.model.as_deref());
    if let Some(k) = args.k {
        pipeline.agent.retrieval_k = k;
    }
    if let Some(m) = args.max_iterations {
        if m == 0 {
            return Err(CliError::usage("--max-iterations must be at least 1"));
        }
        pipeline.max_iterations = m;
    }
    if let Some(p) = &args.payload {
        pipeline.agent.payload_kind = if p == "python" { PayloadKind::Python } else { PayloadKind::Cpp };
    }
    pipeline.pause_for_human = args.pause;

    let backend = Backend::new(config, &args.backend)?;
    let deps = backend.deps().map_err(CliError::usage)?;
    let id = session_id();
    let mut session = Session::new(&id, pipeline, deps);
    if let Some(root) = args.state_dir.clone().or_else(|| config.state_dir.clone()) {
        let dir = SessionDir::create(&root, &id).map_err(|e| CliError::usage(format!("{}: {e}", root.display())))?;
        session = session.with_dir(dir);
    }
    session.start(&requirements).map_err(|e| CliError::usage(e.to_string()))?;
    let state = session.state();
    let report = SessionReport::from_state(state);
    let exit = match state.status {
        SessionStatus::Converged => Exit::Ok,
        SessionStatus::AwaitingHuman => Exit::AwaitingHuman,
        _ => Exit::Failed,
    };
    Ok(Outcome { exit, human: report.to_text(), json: serde_json::to_value(&report).expect("reports serialize") })
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Domain(_) | EvalError::Scenario(_) => CliError::usage(e.to_string()),
        _ => CliError::failed(e.to_string()),
    }
}

pub fn eval(config: &CliConfig, args: EvalArgs) -> CliResult<Outcome> {
    let scenario = Scenario::load(&args.scenario).map_err(|e| CliError::usage(format!("{}: {e}", args.scenario.display())))?;
    let mut opts = BenchmarkOptions::for_scenario(&scenario);
    if let Some(n) = args.n {
        opts.n = n;
    }
    if let Some(k) = args.k {
        opts.k = k;
    }
    // Checked before any provider is contacted.
    if opts.n == 0 || opts.k == 0 || opts.k > opts.n {
        return Err(CliError::usage(format!("domain error: need 1 <= k <= n, got n = {}, k = {}", opts.n, opts.k)));
    }
    opts.agent = config.pipeline(args.model.as_deref()).agent;
    opts.execution = if args.sequential { Execution::Sequential } else { Execution::default() };
    opts.record_path = args.record.clone();

    let mut backend_args = args.backend.clone();
    if backend_args.transcript.is_none() {
        backend_args.transcript = scenario.transcript_path();
    }
    let backend = Backend::new(config, &backend_args)?;
    let factory = move |_: usize| backend.deps();
    let run = run_benchmark(&scenario, &opts, &factory).map_err(eval_error)?;
    let metrics = compute_table_metrics(std::slice::from_ref(&run)).map_err(eval_error)?;
    let pass_at_k = run.pass_at_k().map_err(eval_error)?;
    let human = format!(
        "{}\n\n{}: n = {}, c = {}, pass@{} = {:.3}",
        metrics.table(),
        run.scenario_id,
        run.n,
        run.c,
        run.k,
        pass_at_k
    );
    Ok(Outcome { exit: Exit::Ok, human, json: json!({ "metrics": metrics, "run": run }) })
}

fn service_config(config: &CliConfig, args: &ServeArgs) -> ServiceConfig {
    let state_dir = args
        .state_dir
        .clone()
        .or_else(|| config.state_dir.clone())
        .unwrap_or_else(|| PathBuf::from("nsagent-state"));
    let mut sc = ServiceConfig::new(state_dir);
    sc.pipeline = config.pipeline(None);
    if let Some(n) = args.max_workers.or(config.service.max_workers) {
        sc.max_workers = n;
    }
    if let Some(n) = args.max_sessions.or(config.service.max_sessions) {
        sc.max_sessions = n;
    }
    sc.cors_origins = if args.cors_origins.is_empty() { config.service.cors_origins.clone() } else { args.cors_origins.clone() };
    sc
}

async fn shutdown_signal() {
    let ctrl_c = tokio::signal::ctrl_c();
    #[cfg(unix)]
    {
        let mut term = match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(error = %e, "cannot listen for SIGTERM");
                let _ = ctrl_c.await;
                return;
            }
        };
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = ctrl_c.await;
    }
}

pub fn serve(config: &CliConfig, args: ServeArgs, format: OutputFormat) -> CliResult<Outcome> {
    let backend = Backend::new(config, &args.backend)?;
    let sc = service_config(config, &args);
    let factory: nsagent_service::DepsFactory = Arc::new(move |_: &PipelineConfig| backend.deps());
    let service = Service::open(sc, factory).map_err(|e| CliError::usage(format!("state directory: {e}")))?;
    let bind = args.bind.clone().or_else(|| config.service.bind.clone()).unwrap_or_else(|| "127.0.0.1".into());

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::failed(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((bind.as_str(), args.port))
            .await
            .map_err(|e| CliError::usage(format!("cannot bind {bind}:{}: {e}", args.port)))?;
        let addr = listener.local_addr().map_err(|e| CliError::failed(e.to_string()))?;
        let url = format!("http://{addr}");
        {
            let mut out = std::io::stdout().lock();
            let _ = match format {
                OutputFormat::Human => writeln!(out, "listening on {url}"),
                OutputFormat::Json => writeln!(out, "{}", json!({ "listening": url })),
            };
            let _ = out.flush();
        }
        service.serve(listener, shutdown_signal()).await.map_err(|e| CliError::failed(e.to_string()))?;
        eprintln!("drained; bye");
        Ok(Outcome { exit: Exit::Ok, human: String::new(), json: Value::Null })
    })
}
