use std::sync::{Arc, LazyLock, Mutex};
use std::time::Instant;

use regex::Regex;
use serde_json::json;

use crate::agents::{
    design_tests, execute_and_collect, extract_spec, generate_script, interpret_results, AgentContext, AgentError,
    ExecutionReport, PromptLibrary, TestSuite,
};
use crate::knowledge_store::VectorStore;
use crate::llm_gateway::{ChatProvider, Embedder, HashEmbedder};
use crate::toolchain::Toolchain;

use super::persist::SessionDir;
use super::{
    check_convergence, now_ms, AgentEvent, ConvergencePolicy, Decision, EventKind, FeedbackSource, HumanFeedback,
    IterationRecord, OrchestratorError, Phase, PipelineConfig, SessionState, SessionStatus,
};

/// Receives events as they happen. Implementations must not block.
pub trait EventSink: Send + Sync {
    fn emit(&self, event: &AgentEvent);
    /// Called after every persisted state change.
    fn snapshot(&self, _state: &SessionState) {}
}

#[derive(Clone)]
pub struct PipelineDeps {
    pub provider: Arc<dyn ChatProvider>,
    pub embedder: Arc<dyn Embedder>,
    pub store: Option<Arc<VectorStore>>,
    pub toolchain: Arc<Toolchain>,
    pub prompts: Arc<PromptLibrary>,
}

impl PipelineDeps {
    /// Built-in prompts, a hashing embedder and no knowledge store.
    pub fn offline(provider: Arc<dyn ChatProvider>, toolchain: Toolchain) -> Self {
        Self {
            provider,
            embedder: Arc::new(HashEmbedder::new(256)),
            store: None,
            toolchain: Arc::new(toolchain),
            prompts: Arc::new(PromptLibrary::builtin()),
        }
    }
}

/// Human feedback queued for the next generation round. Shared so that
/// feedback can arrive while the pipeline is running on another thread.
#[derive(Debug, Clone, Default)]
pub struct FeedbackInbox(Arc<Mutex<Vec<String>>>);

impl FeedbackInbox {
    pub fn push(&self, text: impl Into<String>) {
        self.0.lock().unwrap().push(text.into());
    }

    pub fn is_empty(&self) -> bool {
        self.0.lock().unwrap().is_empty()
    }

    fn drain(&self) -> Vec<String> {
        std::mem::take(&mut *self.0.lock().unwrap())
    }
}

static SPEC_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^\s*spec\.([a-z_]+)\s*[:=]\s*(.+?)\s*$").expect("spec line regex"));

const COMPILE_FEEDBACK_CAP: usize = 4000;

/// Feedback items the agents derive from a finished round.
fn agent_feedback(rec: &IterationRecord) -> Vec<String> {
    let mut items = Vec::new();
    if let Some(e) = &rec.generation_error {
        items.push(e.clone());
    }
    if let Some(report) = &rec.report {
        if !report.compile.ok {
            let mut stderr = report.compile.stderr.trim().to_string();
            if stderr.len() > COMPILE_FEEDBACK_CAP {
                let mut cut = COMPILE_FEEDBACK_CAP;
                while !stderr.is_char_boundary(cut) {
                    cut -= 1;
                }
                stderr.truncate(cut);
            }
            items.push(format!("CompileError: {stderr}"));
        }
        for e in &report.error_classes {
            if !report.compile.ok && e.class == crate::results::ErrorKind::CompileError {
                continue;
            }
            items.push(format!("{:?}: {}", e.class, e.evidence.as_deref().unwrap_or("")));
        }
        for c in report.failed_cases() {
            for k in c.checks.iter().filter(|k| !k.passed) {
                let observed = k.observed.map_or("nothing".to_string(), |v| v.to_string());
                items.push(format!("test {} failed: expected {} but observed {observed}", c.case_id, k.check));
            }
        }
    }
    if let Some(i) = &rec.interpretation {
        if i.verdict != crate::agents::Verdict::MeetsCriteria {
            for f in &i.findings {
                items.push(format!(
                    "finding on {}: {}; cause: {}; recommendation: {}",
                    f.metric, f.observation, f.hypothesized_cause, f.recommendation
                ));
            }
        }
    }
    if let Some(e) = &rec.interpretation_error {
        items.push(format!("interpretation unavailable: {e}"));
    }
    items
}

pub struct Session {
    state: SessionState,
    deps: PipelineDeps,
    sinks: Vec<Arc<dyn EventSink>>,
    dir: Option<SessionDir>,
    events: Vec<AgentEvent>,
    next_sequence: u64,
    inbox: FeedbackInbox,
}

impl Session {
    pub fn new(session_id: impl Into<String>, config: PipelineConfig, deps: PipelineDeps) -> Self {
        Self {
            state: SessionState::new(session_id, config),
            deps,
            sinks: Vec::new(),
            dir: None,
            events: Vec::new(),
            next_sequence: 1,
            inbox: FeedbackInbox::default(),
        }
    }

    /// Rebuilds a session from persisted state and events.
    pub fn restore(state: SessionState, events: Vec<AgentEvent>, deps: PipelineDeps) -> Self {
        let next_sequence = events.last().map_or(1, |e| e.sequence + 1);
        Self { state, deps, sinks: Vec::new(), dir: None, events, next_sequence, inbox: FeedbackInbox::default() }
    }

    /// Persists the session under `dir` from now on.
    pub fn with_dir(mut self, dir: SessionDir) -> Self {
        self.dir = Some(dir);
        self.persist(None);
        self
    }

    pub fn with_sink(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.sinks.push(sink);
        self
    }

    pub fn id(&self) -> &str {
        &self.state.session_id
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn into_state(self) -> SessionState {
        self.state
    }

    pub fn events(&self) -> &[AgentEvent] {
        &self.events
    }

    pub fn inbox(&self) -> FeedbackInbox {
        self.inbox.clone()
    }

    fn policy(&self) -> ConvergencePolicy {
        ConvergencePolicy { max_iterations: self.state.config.max_iterations }
    }

    fn emit(&mut self, kind: EventKind, payload: serde_json::Value) {
        let event = AgentEvent {
            session_id: self.state.session_id.clone(),
            sequence: self.next_sequence,
            kind,
            payload,
            timestamp_ms: now_ms(),
        };
        self.next_sequence += 1;
        if let Some(dir) = &self.dir {
            if let Err(e) = dir.append_event(&event) {
                tracing::warn!(error = %e, "could not persist event");
            }
        }
        for s in &self.sinks {
            s.emit(&event);
        }
        self.events.push(event);
    }

    fn persist(&self, in_progress: Option<&IterationRecord>) {
        if let Some(dir) = &self.dir {
            if let Err(e) = dir.append_snapshot(&self.state, in_progress) {
                tracing::warn!(error = %e, "could not persist session record");
            }
        }
        for s in &self.sinks {
            s.snapshot(&self.state);
        }
    }

    fn run_phase<T>(
        &mut self,
        phase: Phase,
        iteration: Option<u32>,
        f: impl FnOnce(&mut AgentContext<'_>) -> Result<T, AgentError>,
    ) -> (Result<T, AgentError>, Instant) {
        let started = Instant::now();
        self.state.status = phase.status();
        self.emit(EventKind::PhaseStarted, json!({ "phase": phase, "iteration": iteration }));
        let deps = self.deps.clone();
        let settings = self.state.config.agent.clone();
        let mut ctx =
            AgentContext::new(&*deps.provider, &*deps.embedder, deps.store.as_deref(), &deps.prompts, &settings);
        let result = f(&mut ctx);
        for call in ctx.take_calls() {
            self.emit(
                EventKind::LlmCall,
                json!({
                    "phase": phase,
                    "iteration": iteration,
                    "agent": call.agent,
                    "model": call.model,
                    "fingerprint": call.fingerprint,
                    "latency_s": call.latency_s,
                    "prompt_chars": call.messages.iter().map(|m| m.content.len()).sum::<usize>(),
                    "reply_chars": call.reply.len(),
                }),
            );
            self.state.llm_seconds_total += call.latency_s;
            self.state.transcript.push(call);
        }
        (result, started)
    }

    fn finish_phase(
        &mut self,
        phase: Phase,
        iteration: Option<u32>,
        started: Instant,
        error: Option<String>,
        rec: Option<&mut IterationRecord>,
    ) {
        let seconds_so_far = started.elapsed().as_secs_f64();
        self.emit(
            EventKind::PhaseFinished,
            json!({ "phase": phase, "iteration": iteration, "ok": error.is_none(), "error": error, "seconds": seconds_so_far }),
        );
        match rec {
            Some(rec) => {
                self.persist(Some(rec));
                rec.phase_timings.insert(phase, started.elapsed().as_secs_f64());
            }
            None => {
                self.persist(None);
                self.state.extract_seconds = started.elapsed().as_secs_f64();
            }
        }
    }

    fn fail(&mut self, reason: String) {
        tracing::info!(session = %self.state.session_id, %reason, "session failed");
        self.state.status = SessionStatus::Failed;
        self.state.failure_reason = Some(reason);
        self.done();
    }

    /// Persists the final state before announcing it, so anyone reacting to
    /// `session_done` already sees the finished record.
    fn done(&mut self) {
        self.persist(None);
        self.emit(
            EventKind::SessionDone,
            json!({
                "status": self.state.status,
                "iterations": self.state.iterations.len(),
                "reason": self.state.failure_reason,
            }),
        );
    }

    /// Replaces the configuration of a session that has not started yet.
    pub fn reconfigure(&mut self, config: PipelineConfig) -> Result<(), OrchestratorError> {
        if self.state.status != SessionStatus::Created {
            return Err(OrchestratorError::AlreadyStarted);
        }
        self.state.config = config;
        self.persist(None);
        Ok(())
    }

    /// Submits the requirements and runs until the session converges, fails
    /// or pauses for human input.
    pub fn start(&mut self, requirements: &str) -> Result<(), OrchestratorError> {
        if self.state.status != SessionStatus::Created {
            return Err(OrchestratorError::AlreadyStarted);
        }
        if requirements.trim().is_empty() {
            return Err(OrchestratorError::InvalidInput("requirements are empty".into()));
        }
        if self.state.config.max_iterations == 0 {
            return Err(OrchestratorError::InvalidInput("max_iterations must be at least 1".into()));
        }
        self.state.requirements = requirements.to_string();
        let (res, started) = self.run_phase(Phase::Extract, None, |ctx| extract_spec(requirements, ctx));
        match res {
            Ok(extraction) => {
                self.state.spec = Some(extraction.spec);
                self.state.extraction_chunk_ids = extraction.retrieved_chunk_ids;
                self.finish_phase(Phase::Extract, None, started, None, None);
                self.drive();
            }
            Err(e) => {
                self.finish_phase(Phase::Extract, None, started, Some(e.to_string()), None);
                self.fail(e.to_string());
            }
        }
        Ok(())
    }

    /// Queues human feedback. A paused session resumes immediately.
    pub fn apply_feedback(&mut self, text: &str) -> Result<(), OrchestratorError> {
        if self.state.status.is_finished() {
            return Err(OrchestratorError::SessionFinished);
        }
        if text.trim().is_empty() {
            return Err(OrchestratorError::InvalidInput("feedback text is empty".into()));
        }
        if self.state.status == SessionStatus::AwaitingHuman
            && self.state.iterations.len() as u32 >= self.state.config.max_iterations
        {
            return Err(OrchestratorError::IterationCapReached);
        }
        self.inbox.push(text);
        self.resume()
    }

    /// Continues a paused session when feedback is queued.
    pub fn resume(&mut self) -> Result<(), OrchestratorError> {
        if self.state.status.is_finished() {
            return Err(OrchestratorError::SessionFinished);
        }
        if self.state.status == SessionStatus::AwaitingHuman && !self.inbox.is_empty() {
            self.drive();
        }
        Ok(())
    }

    /// Accepts the last round: converges if it passed, otherwise continues
    /// with agent feedback (or fails at the cap).
    pub fn approve(&mut self, note: Option<&str>) -> Result<(), OrchestratorError> {
        if self.state.status.is_finished() {
            return Err(OrchestratorError::SessionFinished);
        }
        if self.state.status != SessionStatus::AwaitingHuman {
            return Err(OrchestratorError::NotAwaitingHuman);
        }
        let text = note.unwrap_or("").to_string();
        self.state.human_feedback.push(HumanFeedback { timestamp_ms: now_ms(), text: text.clone(), approve: true });
        self.emit(EventKind::HumanFeedbackApplied, json!({ "text": text, "approve": true, "spec_changes": [] }));
        let last = self.state.iterations.last().expect("paused sessions have an iteration");
        match check_convergence(last, &self.policy()) {
            Decision::Converged => {
                self.state.status = SessionStatus::Converged;
                self.done();
            }
            Decision::GiveUp => self.fail(format!("no converged iteration within {} iterations", last.index)),
            Decision::Continue => self.drive(),
        }
        Ok(())
    }

    /// Drains queued human feedback, applying `spec.<field> = <value>` lines.
    fn collect_feedback(&mut self) -> (Vec<String>, Option<FeedbackSource>) {
        let agent = self.state.iterations.last().map(agent_feedback).unwrap_or_default();
        let mut items = agent.clone();
        let mut human_items = 0;
        for text in self.inbox.drain() {
            let mut changes = Vec::new();
            let mut errors = Vec::new();
            if let Some(spec) = self.state.spec.as_mut() {
                for cap in SPEC_LINE.captures_iter(&text) {
                    match spec.set(&cap[1], &cap[2]) {
                        Ok(()) => changes.push(format!("{} = {}", &cap[1], &cap[2])),
                        Err(e) => errors.push(format!("{}: {e}", &cap[1])),
                    }
                }
            }
            if !changes.is_empty() {
                self.state.redesign_pending = true;
            }
            self.state.human_feedback.push(HumanFeedback { timestamp_ms: now_ms(), text: text.clone(), approve: false });
            self.emit(
                EventKind::HumanFeedbackApplied,
                json!({ "text": text, "approve": false, "spec_changes": changes, "spec_errors": errors }),
            );
            items.push(format!("human: {text}"));
            human_items += 1;
        }
        let source = match (!agent.is_empty(), human_items > 0) {
            (true, true) => Some(FeedbackSource::Both),
            (false, true) => Some(FeedbackSource::Human),
            (true, false) => Some(FeedbackSource::Agent),
            (false, false) => None,
        };
        (items, source)
    }

    fn current_suite(&self) -> Option<TestSuite> {
        self.state.iterations.iter().rev().find_map(|i| i.suite.clone())
    }

    /// One generate / design / execute / interpret round. `Err` is fatal.
    fn run_iteration(&mut self, index: u32) -> Result<IterationRecord, String> {
        let (feedback, feedback_source) = self.collect_feedback();
        let spec = self.state.spec.clone().expect("spec is set before iterating");
        let mut rec = IterationRecord {
            index,
            script: None,
            generation_error: None,
            suite: None,
            report: None,
            interpretation: None,
            interpretation_error: None,
            feedback_source,
            feedback: feedback.clone(),
            phase_timings: Default::default(),
            wall_seconds: 0.0,
            decision: Decision::Continue,
        };
        let wall = Instant::now();
        let it = Some(index);

        let (res, t) = self.run_phase(Phase::Generate, it, |ctx| generate_script(&spec, &feedback, index, ctx));
        let script = match res {
            Ok(s) => s,
            Err(AgentError::ShapeCheckFailed { script, missing }) => {
                let msg = format!("ShapeCheckFailed: the script lacks {}", missing.join(", "));
                if let Some(dir) = &self.dir {
                    let _ = dir.write_script(&script);
                }
                rec.script = Some(*script);
                rec.generation_error = Some(msg.clone());
                self.finish_phase(Phase::Generate, it, t, Some(msg), Some(&mut rec));
                rec.wall_seconds = wall.elapsed().as_secs_f64();
                return Ok(rec);
            }
            Err(AgentError::NoCodeBlock) => {
                let msg = "NoCodeBlock: the reply contained no fenced code block".to_string();
                rec.generation_error = Some(msg.clone());
                self.finish_phase(Phase::Generate, it, t, Some(msg), Some(&mut rec));
                rec.wall_seconds = wall.elapsed().as_secs_f64();
                return Ok(rec);
            }
            Err(e) => {
                self.finish_phase(Phase::Generate, it, t, Some(e.to_string()), Some(&mut rec));
                return Err(e.to_string());
            }
        };
        if let Some(dir) = &self.dir {
            if let Err(e) = dir.write_script(&script) {
                tracing::warn!(error = %e, "could not persist script");
            }
        }
        rec.script = Some(script.clone());
        self.finish_phase(Phase::Generate, it, t, None, Some(&mut rec));

        let reusable = self
            .current_suite()
            .filter(|s| !self.state.redesign_pending && s.validate(&spec).is_ok());
        let reused = reusable.is_some();
        let (res, t) = self.run_phase(Phase::Design, it, |ctx| match reusable {
            Some(s) => Ok(s),
            None => design_tests(&spec, &script, ctx),
        });
        let suite = match res {
            Ok(s) => s,
            Err(e) => {
                self.finish_phase(Phase::Design, it, t, Some(e.to_string()), Some(&mut rec));
                return Err(e.to_string());
            }
        };
        self.state.redesign_pending = false;
        rec.suite = Some(suite.clone());
        if reused {
            tracing::debug!(index, "reusing test suite");
        }
        self.finish_phase(Phase::Design, it, t, None, Some(&mut rec));

        let toolchain = self.deps.toolchain.clone();
        let method = self.state.config.agent.invocation;
        let execution = self.state.config.execution;
        let (res, t) = self.run_phase(Phase::Execute, it, |_| {
            execute_and_collect(&script, &suite, &spec, &toolchain, method, execution)
        });
        let report: ExecutionReport = match res {
            Ok(r) => r,
            Err(e) => {
                self.finish_phase(Phase::Execute, it, t, Some(e.to_string()), Some(&mut rec));
                return Err(e.to_string());
            }
        };
        self.emit(
            EventKind::ToolRun,
            json!({ "iteration": index, "stage": "compile", "ok": report.compile.ok, "exit_status": report.compile.exit_status, "seconds": report.compile.seconds }),
        );
        for c in &report.cases {
            if c.exit_status.is_some() {
                self.emit(
                    EventKind::ToolRun,
                    json!({ "iteration": index, "stage": "run", "case_id": c.case_id, "exit_status": c.exit_status, "timed_out": c.timed_out, "seconds": c.timings.total }),
                );
            }
        }
        for c in &report.cases {
            self.emit(
                EventKind::CaseResult,
                json!({
                    "iteration": index,
                    "case_id": c.case_id,
                    "kind": c.kind,
                    "passed": c.passed,
                    "errors": c.errors.iter().map(|e| e.class).collect::<Vec<_>>(),
                }),
            );
        }
        if let Some(dir) = &self.dir {
            if let Err(e) = dir.write_outputs(&report) {
                tracing::warn!(error = %e, "could not persist tool outputs");
            }
        }
        rec.report = Some(report.clone());
        self.finish_phase(Phase::Execute, it, t, None, Some(&mut rec));

        let (res, t) = self.run_phase(Phase::Interpret, it, |ctx| interpret_results(&report, &spec, ctx));
        match res {
            Ok(i) => {
                rec.interpretation = Some(i);
                self.finish_phase(Phase::Interpret, it, t, None, Some(&mut rec));
            }
            Err(AgentError::MalformedInterpretation(reason)) => {
                rec.interpretation_error = Some(reason.clone());
                self.finish_phase(Phase::Interpret, it, t, Some(reason), Some(&mut rec));
            }
            Err(e) => {
                self.finish_phase(Phase::Interpret, it, t, Some(e.to_string()), Some(&mut rec));
                return Err(e.to_string());
            }
        }
        rec.wall_seconds = wall.elapsed().as_secs_f64();
        Ok(rec)
    }

    fn drive(&mut self) {
        loop {
            let index = self.state.iterations.len() as u32 + 1;
            if index > self.state.config.max_iterations {
                self.fail(format!("no converged iteration within {} iterations", index - 1));
                return;
            }
            let mut rec = match self.run_iteration(index) {
                Ok(r) => r,
                Err(reason) => {
                    self.fail(reason);
                    return;
                }
            };
            let decision = check_convergence(&rec, &self.policy());
            rec.decision = decision;
            if let Some(r) = &rec.report {
                self.state.tool_seconds_total += r.tool_seconds;
            }
            let verdict = rec.interpretation.as_ref().map(|i| i.verdict);
            let all_passed = rec.report.as_ref().is_some_and(|r| r.all_passed);
            self.state.iterations.push(rec);
            self.emit(
                EventKind::IterationDone,
                json!({ "iteration": index, "decision": decision, "verdict": verdict, "all_passed": all_passed }),
            );
            match decision {
                Decision::GiveUp => {
                    self.fail(format!("no converged iteration within {index} iterations"));
                    return;
                }
                _ if self.state.config.pause_for_human => {
                    self.state.status = SessionStatus::AwaitingHuman;
                    self.persist(None);
                    return;
                }
                Decision::Converged => {
                    self.state.status = SessionStatus::Converged;
                    self.done();
                    return;
                }
                Decision::Continue => self.persist(None),
            }
        }
    }
}

/// Runs a fresh session to completion (or to its first pause).
pub fn run_pipeline(requirements: &str, config: PipelineConfig, deps: PipelineDeps) -> Result<SessionState, OrchestratorError> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let mut session = Session::new(id, config, deps);
    session.start(requirements)?;
    Ok(session.into_state())
}
