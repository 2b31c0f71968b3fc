use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use nsagent_core::exec::Execution;
use nsagent_core::llm_gateway::{ScriptedProvider, Transcript};
use nsagent_core::orchestrator::{
    AgentEvent, Decision, EventKind, EventSink, FeedbackSource, OrchestratorError, PipelineConfig, PipelineDeps,
    Session, SessionDir, SessionReport, SessionState, SessionStatus,
};
use nsagent_core::toolchain::{FakeSimulator, Toolchain, ToolchainConfig};

const REQUIREMENTS: &str = "Simulate a 5G NR cell at 28 GHz with 200 MHz of bandwidth serving 100 UEs from one gNB \
     over TCP in an urban micro street canyon, with beamforming enabled.";

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn deps(transcript: &str) -> (PipelineDeps, Arc<ScriptedProvider>, tempfile::TempDir) {
    let work = tempfile::tempdir().unwrap();
    let provider = Arc::new(ScriptedProvider::new(Transcript::load(&fixture(transcript)).unwrap()).unwrap());
    let mut cfg = ToolchainConfig::fake(FakeSimulator::with_sleep(0.0));
    cfg.work_root = work.path().to_path_buf();
    (PipelineDeps::offline(provider.clone(), Toolchain::new(cfg)), provider, work)
}

fn config(max_iterations: u32, pause: bool) -> PipelineConfig {
    PipelineConfig { max_iterations, pause_for_human: pause, ..Default::default() }
}

#[derive(Default)]
struct Collect(Mutex<Vec<AgentEvent>>);

impl EventSink for Collect {
    fn emit(&self, event: &AgentEvent) {
        self.0.lock().unwrap().push(event.clone());
    }
}

fn check_event_invariants(events: &[AgentEvent]) {
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.sequence, i as u64 + 1, "sequence must be gapless");
    }
    let mut open: Option<(String, Option<u64>)> = None;
    for e in events {
        let phase = e.payload.get("phase").and_then(|p| p.as_str()).map(str::to_string);
        let iteration = e.payload.get("iteration").and_then(|v| v.as_u64());
        match e.kind {
            EventKind::PhaseStarted => {
                assert!(open.is_none(), "phase started while another is open");
                open = Some((phase.unwrap(), iteration));
            }
            EventKind::PhaseFinished => {
                assert_eq!(open.take(), Some((phase.unwrap(), iteration)), "unmatched phase_finished");
            }
            _ => {}
        }
    }
    assert!(open.is_none());
    let done: Vec<_> = events.iter().filter(|e| e.kind == EventKind::SessionDone).collect();
    assert!(done.len() <= 1);
    if let Some(d) = done.first() {
        assert_eq!(d.sequence, events.last().unwrap().sequence, "session_done is terminal");
    }
}

#[test]
fn case_study_converges_on_second_iteration() {
    let (deps, provider, _work) = deps("case_study_transcript.json");
    let sink = Arc::new(Collect::default());
    let mut session = Session::new("case-study", config(5, false), deps).with_sink(sink.clone());
    session.start(REQUIREMENTS).unwrap();
    let state = session.state().clone();

    assert_eq!(state.status, SessionStatus::Converged, "{:?}", state.failure_reason);
    assert_eq!(provider.remaining(), 0);
    assert_eq!(state.iterations.len(), 2);

    let first = &state.iterations[0];
    assert!(!first.first_compile_ok());
    assert_eq!(first.decision, Decision::Continue);
    assert_eq!(first.feedback_source, None);

    let second = &state.iterations[1];
    assert_eq!(second.feedback_source, Some(FeedbackSource::Agent));
    assert!(second.feedback.iter().any(|f| f.starts_with("CompileError:")));
    assert_eq!(second.decision, Decision::Converged);
    assert!(second.report.as_ref().unwrap().all_passed);
    assert_eq!(second.suite, first.suite, "suite is reused when the spec is unchanged");

    let suite = second.suite.as_ref().unwrap();
    assert!(suite.get("tcp-throughput").is_some());
    assert!(suite.get("radio-metric").is_none(), "unknown metrics are dropped");

    // Generation prompt of the second round carries the compiler diagnostic verbatim.
    let log = provider.replay_log();
    let gen2 = &log[4].request.messages.last().unwrap().content;
    let diag = &first.report.as_ref().unwrap().compile.stderr;
    assert!(gen2.contains(diag.trim().lines().next().unwrap()));

    let events = sink.0.lock().unwrap().clone();
    assert_eq!(events, session.events());
    check_event_invariants(&events);
    assert_eq!(events.last().unwrap().kind, EventKind::SessionDone);

    let report = SessionReport::from_state(&state);
    assert_eq!(report.metrics.iterations_to_converge, Some(2));
    assert!(report.kpi_table.is_some());
}

#[test]
fn replay_is_deterministic() {
    let run = || {
        let (deps, _, _work) = deps("case_study_transcript.json");
        let mut s = Session::new("replay", config(5, false), deps);
        s.start(REQUIREMENTS).unwrap();
        let events: Vec<_> = s.events().iter().map(|e| (e.sequence, e.kind)).collect();
        (s.into_state().normalized(), events)
    };
    let (a, ea) = run();
    let (b, eb) = run();
    assert_eq!(a, b);
    assert_eq!(ea, eb);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn sequential_and_parallel_execution_agree() {
    let run = |execution| {
        let (deps, _, _work) = deps("case_study_transcript.json");
        let cfg = PipelineConfig { execution, ..config(5, false) };
        let mut s = Session::new("exec", cfg, deps);
        s.start(REQUIREMENTS).unwrap();
        s.into_state().normalized()
    };
    let mut seq = run(Execution::Sequential);
    seq.config.execution = Execution::default();
    assert_eq!(seq, run(Execution::default()));
}

#[test]
fn always_failing_stops_at_the_cap() {
    let (deps, provider, _work) = deps("always_failing_transcript.json");
    let mut session = Session::new("cap", config(5, false), deps);
    session.start(REQUIREMENTS).unwrap();
    let state = session.state();
    assert_eq!(state.status, SessionStatus::Failed);
    assert_eq!(state.iterations.len(), 5);
    assert_eq!(state.failure_reason.as_deref(), Some("no converged iteration within 5 iterations"));
    assert_eq!(state.iterations.last().unwrap().decision, Decision::GiveUp);
    // extract, one design call, and generate + interpret per round
    assert_eq!(provider.consumed(), 1 + 1 + 2 * 5);
    assert_eq!(state.transcript.len(), provider.consumed());
    check_event_invariants(session.events());
    assert!(matches!(session.apply_feedback("try again"), Err(OrchestratorError::SessionFinished)));
}

#[test]
fn pause_feedback_and_approve() {
    let (deps, provider, _work) = deps("case_study_transcript.json");
    let mut session = Session::new("pause", config(5, true), deps);
    session.start(REQUIREMENTS).unwrap();
    assert_eq!(session.state().status, SessionStatus::AwaitingHuman);
    assert_eq!(session.state().iterations.len(), 1);
    assert!(matches!(session.start(REQUIREMENTS), Err(OrchestratorError::AlreadyStarted)));

    session.apply_feedback("close the main function").unwrap();
    let state = session.state();
    assert_eq!(state.status, SessionStatus::AwaitingHuman);
    assert_eq!(state.iterations.len(), 2);
    let second = &state.iterations[1];
    assert_eq!(second.feedback_source, Some(FeedbackSource::Both));
    assert!(second.feedback.contains(&"human: close the main function".to_string()));
    assert_eq!(second.decision, Decision::Converged);

    session.approve(Some("looks right")).unwrap();
    assert_eq!(session.state().status, SessionStatus::Converged);
    assert_eq!(provider.remaining(), 0);
    assert!(matches!(session.approve(None), Err(OrchestratorError::SessionFinished)));
    check_event_invariants(session.events());
    let kinds: Vec<_> = session.events().iter().map(|e| e.kind).collect();
    assert_eq!(kinds.iter().filter(|k| **k == EventKind::HumanFeedbackApplied).count(), 2);
}

#[test]
fn approve_requires_a_pause() {
    let (deps, _, _work) = deps("case_study_transcript.json");
    let mut session = Session::new("np", config(5, false), deps);
    assert!(matches!(session.approve(None), Err(OrchestratorError::NotAwaitingHuman)));
    assert!(matches!(session.start("   "), Err(OrchestratorError::InvalidInput(_))));
}

#[test]
fn feedback_at_the_cap_is_rejected() {
    let (deps, _, _work) = deps("case_study_transcript.json");
    let mut session = Session::new("capped", config(2, true), deps);
    session.start(REQUIREMENTS).unwrap();
    session.apply_feedback("close the brace").unwrap();
    assert_eq!(session.state().status, SessionStatus::AwaitingHuman);
    assert_eq!(session.state().iterations.len(), 2);
    assert!(matches!(session.apply_feedback("more"), Err(OrchestratorError::IterationCapReached)));
    session.approve(None).unwrap();
    assert_eq!(session.state().status, SessionStatus::Converged);
}

#[test]
fn failing_round_at_the_cap_does_not_pause() {
    let (deps, _, _work) = deps("always_failing_transcript.json");
    let mut session = Session::new("capped", config(1, true), deps);
    session.start(REQUIREMENTS).unwrap();
    assert_eq!(session.state().status, SessionStatus::Failed);
}

#[test]
fn exhausted_transcript_fails_the_session() {
    let work = tempfile::tempdir().unwrap();
    let provider = Arc::new(ScriptedProvider::from_replies(["```spec\nnum_ues: 3\n```"]).unwrap());
    let mut cfg = ToolchainConfig::fake(FakeSimulator::with_sleep(0.0));
    cfg.work_root = work.path().to_path_buf();
    let mut session = Session::new("short", config(3, false), PipelineDeps::offline(provider, Toolchain::new(cfg)));
    session.start(REQUIREMENTS).unwrap();
    let state = session.state();
    assert_eq!(state.status, SessionStatus::Failed);
    assert!(state.iterations.is_empty());
    assert!(state.failure_reason.is_some());
}

#[test]
fn persisted_session_round_trips() {
    let root = tempfile::tempdir().unwrap();
    let (deps, _, _work) = deps("case_study_transcript.json");
    let dir = SessionDir::create(root.path(), "persisted").unwrap();
    let mut session = Session::new("persisted", config(5, false), deps).with_dir(dir);
    session.start(REQUIREMENTS).unwrap();
    let live: SessionState = session.state().clone();

    let reopened = SessionDir::open(root.path(), "persisted").unwrap();
    let (loaded, events) = reopened.load().unwrap();
    assert_eq!(loaded, live);
    assert_eq!(events, session.events());
    assert!(reopened.path().join("scripts/iter-1.cc").is_file());
    assert!(reopened.path().join("scripts/iter-2.cc").is_file());
    assert!(reopened.path().join("outputs/iter-1/compile.stderr").is_file());
}

#[test]
fn reconfigure_only_before_start() {
    let (deps, _, _work) = deps("case_study_transcript.json");
    let mut fresh = Session::new("fresh", config(5, false), deps);
    fresh.reconfigure(config(2, true)).unwrap();
    assert_eq!(fresh.state().config.max_iterations, 2);
    fresh.start(REQUIREMENTS).unwrap();
    assert!(matches!(fresh.reconfigure(config(3, false)), Err(OrchestratorError::AlreadyStarted)));
}
