//! Drives the agent pipeline for one session: extraction, then
//! generate / design / execute / interpret rounds until convergence, the
//! iteration cap, or a pause for human input.

mod persist;
mod report;
mod session;

pub use persist::{list_sessions, SessionDir, RECORD_VERSION};
pub use report::{IterationSummary, SessionReport, REPORT_VERSION};
pub use session::{run_pipeline, EventSink, FeedbackInbox, PipelineDeps, Session};

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    AgentSettings, ExecutionReport, GeneratedScript, InterpretationReport, LlmCall, SimulationSpec, TestSuite, Verdict,
};
use crate::exec::Execution;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrchestratorError {
    #[error("session already finished")]
    SessionFinished,
    #[error("session is not waiting for human input")]
    NotAwaitingHuman,
    #[error("session already started")]
    AlreadyStarted,
    #[error("iteration cap reached; approve or let the session end")]
    IterationCapReached,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Created,
    Extracting,
    Generating,
    Testing,
    Executing,
    Interpreting,
    AwaitingHuman,
    Converged,
    Failed,
}

impl SessionStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, SessionStatus::Converged | SessionStatus::Failed)
    }

    pub fn is_running(self) -> bool {
        matches!(
            self,
            SessionStatus::Extracting
                | SessionStatus::Generating
                | SessionStatus::Testing
                | SessionStatus::Executing
                | SessionStatus::Interpreting
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Created => "created",
            SessionStatus::Extracting => "extracting",
            SessionStatus::Generating => "generating",
            SessionStatus::Testing => "testing",
            SessionStatus::Executing => "executing",
            SessionStatus::Interpreting => "interpreting",
            SessionStatus::AwaitingHuman => "awaiting_human",
            SessionStatus::Converged => "converged",
            SessionStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Extract,
    Generate,
    Design,
    Execute,
    Interpret,
}

impl Phase {
    pub fn status(self) -> SessionStatus {
        match self {
            Phase::Extract => SessionStatus::Extracting,
            Phase::Generate => SessionStatus::Generating,
            Phase::Design => SessionStatus::Testing,
            Phase::Execute => SessionStatus::Executing,
            Phase::Interpret => SessionStatus::Interpreting,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Agent,
    Human,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Converged,
    Continue,
    GiveUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    /// Absent only when the reply had no code block.
    pub script: Option<GeneratedScript>,
    /// Why generation produced no runnable script, if it did not.
    pub generation_error: Option<String>,
    pub suite: Option<TestSuite>,
    pub report: Option<ExecutionReport>,
    pub interpretation: Option<InterpretationReport>,
    /// Why interpretation is absent, if it is.
    pub interpretation_error: Option<String>,
    /// `None` for the first round, which has no feedback.
    pub feedback_source: Option<FeedbackSource>,
    /// Items handed to the generator, verbatim.
    pub feedback: Vec<String>,
    pub phase_timings: BTreeMap<Phase, f64>,
    pub wall_seconds: f64,
    pub decision: Decision,
}

impl IterationRecord {
    pub fn first_compile_ok(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.compile.ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvergencePolicy {
    pub max_iterations: u32,
}

/// Converged iff every case passed, no error class was seen and the
/// interpreter approved. Otherwise give up at the cap, else continue.
pub fn check_convergence(iter: &IterationRecord, policy: &ConvergencePolicy) -> Decision {
    let approved = iter.interpretation.as_ref().is_some_and(|i| i.verdict == Verdict::MeetsCriteria);
    let clean = iter
        .report
        .as_ref()
        .is_some_and(|r| r.all_passed && r.error_classes.is_empty() && r.cases.iter().all(|c| c.passed));
    if approved && clean && iter.generation_error.is_none() {
        Decision::Converged
    } else if iter.index >= policy.max_iterations {
        Decision::GiveUp
    } else {
        Decision::Continue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_iterations: u32,
    pub pause_for_human: bool,
    pub agent: AgentSettings,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { max_iterations: 5, pause_for_human: false, agent: AgentSettings::default(), execution: Execution::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanFeedback {
    pub timestamp_ms: u64,
    pub text: String,
    pub approve: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub created_ms: u64,
    pub requirements: String,
    pub config: PipelineConfig,
    pub status: SessionStatus,
    pub failure_reason: Option<String>,
    pub spec: Option<SimulationSpec>,
    pub extract_seconds: f64,
    pub extraction_chunk_ids: Vec<String>,
    pub iterations: Vec<IterationRecord>,
    pub human_feedback: Vec<HumanFeedback>,
    /// Every LLM exchange in order; the archived raw replies.
    pub transcript: Vec<LlmCall>,
    pub llm_seconds_total: f64,
    pub tool_seconds_total: f64,
    /// The spec changed since the suite was designed.
    pub redesign_pending: bool,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>, config: PipelineConfig) -> Self {
        Self {
            session_id: session_id.into(),
            created_ms: now_ms(),
            requirements: String::new(),
            config,
            status: SessionStatus::Created,
            failure_reason: None,
            spec: None,
            extract_seconds: 0.0,
            extraction_chunk_ids: Vec::new(),
            iterations: Vec::new(),
            human_feedback: Vec::new(),
            transcript: Vec::new(),
            llm_seconds_total: 0.0,
            tool_seconds_total: 0.0,
            redesign_pending: false,
        }
    }

    /// Copy with every wall-clock quantity zeroed, for replay comparisons.
    pub fn normalized(&self) -> Self {
        let mut s = self.clone();
        s.created_ms = 0;
        s.extract_seconds = 0.0;
        s.llm_seconds_total = 0.0;
        s.tool_seconds_total = 0.0;
        for c in &mut s.transcript {
            c.latency_s = 0.0;
        }
        for h in &mut s.human_feedback {
            h.timestamp_ms = 0;
        }
        for it in &mut s.iterations {
            it.wall_seconds = 0.0;
            for v in it.phase_timings.values_mut() {
                *v = 0.0;
            }
            if let Some(r) = &mut it.report {
                r.compile.seconds = 0.0;
                r.tool_seconds = 0.0;
                for c in &mut r.cases {
                    c.timings = Default::default();
                }
            }
        }
        s
    }

    pub fn last_iteration(&self) -> Option<&IterationRecord> {
        self.iterations.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PhaseStarted,
    PhaseFinished,
    LlmCall,
    ToolRun,
    CaseResult,
    IterationDone,
    HumanFeedbackApplied,
    SessionDone,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::PhaseStarted,
        EventKind::PhaseFinished,
        EventKind::LlmCall,
        EventKind::ToolRun,
        EventKind::CaseResult,
        EventKind::IterationDone,
        EventKind::HumanFeedbackApplied,
        EventKind::SessionDone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::PhaseStarted => "phase_started",
            EventKind::PhaseFinished => "phase_finished",
            EventKind::LlmCall => "llm_call",
            EventKind::ToolRun => "tool_run",
            EventKind::CaseResult => "case_result",
            EventKind::IterationDone => "iteration_done",
            EventKind::HumanFeedbackApplied => "human_feedback_applied",
            EventKind::SessionDone => "session_done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEvent {
    pub session_id: String,
    /// Starts at 1, gapless per session.
    pub sequence: u64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
    pub timestamp_ms: u64,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{CompileRecord, InterpretationReport};
    use crate::toolchain::{InvocationMethod, PayloadKind};

    fn iteration(index: u32, passed: bool, verdict: Verdict) -> IterationRecord {
        IterationRecord {
            index,
            script: None,
            generation_error: None,
            suite: None,
            report: Some(ExecutionReport {
                iteration: index,
                payload_kind: PayloadKind::Cpp,
                method: InvocationMethod::Native,
                compile: CompileRecord { ok: true, exit_status: 0, stdout: String::new(), stderr: String::new(), seconds: 0.0 },
                cases: vec![],
                kpis: None,
                error_classes: vec![],
                all_passed: passed,
                tool_seconds: 0.0,
            }),
            interpretation: Some(InterpretationReport {
                summary: "s".into(),
                findings: vec![],
                verdict,
                llm_verdict: verdict,
                overridden: false,
            }),
            interpretation_error: None,
            feedback_source: None,
            feedback: vec![],
            phase_timings: BTreeMap::new(),
            wall_seconds: 0.0,
            decision: Decision::Continue,
        }
    }

    #[test]
    fn convergence_rules() {
        let p = ConvergencePolicy { max_iterations: 3 };
        assert_eq!(check_convergence(&iteration(1, true, Verdict::MeetsCriteria), &p), Decision::Converged);
        assert_eq!(check_convergence(&iteration(2, false, Verdict::NeedsRefinement), &p), Decision::Continue);
        assert_eq!(check_convergence(&iteration(3, false, Verdict::NeedsRefinement), &p), Decision::GiveUp);
        assert_eq!(check_convergence(&iteration(3, true, Verdict::MeetsCriteria), &p), Decision::Converged);
        assert_eq!(check_convergence(&iteration(1, true, Verdict::NeedsRefinement), &p), Decision::Continue);
    }

    #[test]
    fn status_wire_names() {
        assert_eq!(serde_json::to_string(&SessionStatus::AwaitingHuman).unwrap(), "\"awaiting_human\"");
        assert_eq!(serde_json::to_string(&EventKind::HumanFeedbackApplied).unwrap(), "\"human_feedback_applied\"");
        for k in EventKind::ALL {
            assert_eq!(serde_json::to_value(k).unwrap(), k.as_str());
        }
    }
}
