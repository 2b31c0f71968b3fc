use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::agents::{InterpretationReport, SimulationSpec, TestCaseKind, Verdict};
use crate::results::{ErrorClass, KpiReport};
use crate::toolchain::PayloadKind;

use super::{Decision, FeedbackSource, HumanFeedback, Phase, SessionState, SessionStatus};

pub const REPORT_VERSION: &str = "nsagent.report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub kind: TestCaseKind,
    pub passed: bool,
    pub exit_status: Option<i32>,
    pub errors: Vec<ErrorClass>,
    pub failed_checks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub index: u32,
    pub feedback_source: Option<FeedbackSource>,
    pub feedback: Vec<String>,
    pub payload_kind: Option<PayloadKind>,
    pub script: Option<String>,
    pub prompt_fingerprint: Option<String>,
    pub retrieved_chunk_ids: Vec<String>,
    pub generation_error: Option<String>,
    pub compile_ok: Option<bool>,
    pub compile_stderr: Option<String>,
    pub cases: Vec<CaseSummary>,
    pub error_classes: Vec<ErrorClass>,
    pub kpis: Option<KpiReport>,
    pub interpretation: Option<InterpretationReport>,
    pub decision: Decision,
    pub phase_timings: BTreeMap<Phase, f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub iterations: usize,
    pub iterations_to_converge: Option<u32>,
    pub first_compile_ok: Option<bool>,
    pub llm_calls: usize,
    pub llm_seconds: f64,
    pub tool_seconds: f64,
    /// LLM latency plus tool time.
    pub response_seconds: f64,
}

/// The session document served to clients and printed by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub report_version: String,
    pub session_id: String,
    pub status: SessionStatus,
    pub failure_reason: Option<String>,
    pub requirements: String,
    pub spec: Option<SimulationSpec>,
    pub verdict: Option<Verdict>,
    pub kpis: Option<KpiReport>,
    pub kpi_table: Option<String>,
    /// Error classes of the last round.
    pub error_classes: Vec<ErrorClass>,
    /// Most specific error evidence available, for failed sessions.
    pub last_error: Option<String>,
    pub interpretation: Option<InterpretationReport>,
    pub iterations: Vec<IterationSummary>,
    pub metrics: ReportMetrics,
    pub human_feedback: Vec<HumanFeedback>,
}

impl SessionReport {
    pub fn from_state(state: &SessionState) -> Self {
        let iterations: Vec<IterationSummary> = state
            .iterations
            .iter()
            .map(|it| {
                let report = it.report.as_ref();
                IterationSummary {
                    index: it.index,
                    feedback_source: it.feedback_source,
                    feedback: it.feedback.clone(),
                    payload_kind: it.script.as_ref().map(|s| s.payload_kind),
                    script: it.script.as_ref().map(|s| s.source_text.clone()),
                    prompt_fingerprint: it.script.as_ref().map(|s| s.prompt_fingerprint.clone()),
                    retrieved_chunk_ids: it.script.as_ref().map(|s| s.retrieved_chunk_ids.clone()).unwrap_or_default(),
                    generation_error: it.generation_error.clone(),
                    compile_ok: report.map(|r| r.compile.ok),
                    compile_stderr: report.filter(|r| !r.compile.ok).map(|r| r.compile.stderr.clone()),
                    cases: report
                        .map(|r| {
                            r.cases
                                .iter()
                                .map(|c| CaseSummary {
                                    case_id: c.case_id.clone(),
                                    kind: c.kind,
                                    passed: c.passed,
                                    exit_status: c.exit_status,
                                    errors: c.errors.clone(),
                                    failed_checks: c
                                        .checks
                                        .iter()
                                        .filter(|k| !k.passed)
                                        .map(|k| {
                                            let obs = k.observed.map_or("n/a".to_string(), |v| v.to_string());
                                            format!("{} (observed {obs})", k.check)
                                        })
                                        .collect(),
                                })
                                .collect()
                        })
                        .unwrap_or_default(),
                    error_classes: report.map(|r| r.error_classes.clone()).unwrap_or_default(),
                    kpis: report.and_then(|r| r.kpis.as_ref()).map(|k| k.to_report()),
                    interpretation: it.interpretation.clone(),
                    decision: it.decision,
                    phase_timings: it.phase_timings.clone(),
                    wall_seconds: it.wall_seconds,
                }
            })
            .collect();
        let last = state.iterations.last();
        let last_kpis = state.iterations.iter().rev().find_map(|i| i.report.as_ref().and_then(|r| r.kpis.clone()));
        let error_classes = last.and_then(|i| i.report.as_ref()).map(|r| r.error_classes.clone()).unwrap_or_default();
        let last_error = error_classes
            .iter()
            .find_map(|e| e.evidence.clone())
            .or_else(|| last.and_then(|i| i.generation_error.clone()))
            .or_else(|| state.failure_reason.clone());
        let converged_at = (state.status == SessionStatus::Converged).then(|| last.map_or(0, |i| i.index));
        Self {
            report_version: REPORT_VERSION.to_string(),
            session_id: state.session_id.clone(),
            status: state.status,
            failure_reason: state.failure_reason.clone(),
            requirements: state.requirements.clone(),
            spec: state.spec.clone(),
            verdict: last.and_then(|i| i.interpretation.as_ref()).map(|i| i.verdict),
            kpis: last_kpis.as_ref().map(|k| k.to_report()),
            kpi_table: last_kpis.as_ref().map(|k| k.table()),
            error_classes,
            last_error,
            interpretation: last.and_then(|i| i.interpretation.clone()),
            iterations,
            metrics: ReportMetrics {
                iterations: state.iterations.len(),
                iterations_to_converge: converged_at,
                first_compile_ok: state.iterations.first().map(|i| i.first_compile_ok()),
                llm_calls: state.transcript.len(),
                llm_seconds: state.llm_seconds_total,
                tool_seconds: state.tool_seconds_total,
                response_seconds: state.llm_seconds_total + state.tool_seconds_total,
            },
            human_feedback: state.human_feedback.clone(),
        }
    }

    /// Plain-text rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "session {}: {}", self.session_id, self.status.as_str());
        if let Some(r) = &self.failure_reason {
            let _ = writeln!(s, "reason: {r}");
        }
        if let Some(spec) = &self.spec {
            let _ = writeln!(s, "\nscenario:");
            for line in spec.to_kv().lines() {
                let _ = writeln!(s, "  {line}");
            }
        }
        for it in &self.iterations {
            let passed = it.cases.iter().filter(|c| c.passed).count();
            let _ = writeln!(
                s,
                "\niteration {}: compile {}, {passed}/{} cases passed, decision {:?}",
                it.index,
                match it.compile_ok {
                    Some(true) => "ok",
                    Some(false) => "failed",
                    None => "skipped",
                },
                it.cases.len(),
                it.decision
            );
            if let Some(e) = &it.generation_error {
                let _ = writeln!(s, "  generation: {e}");
            }
            for e in &it.error_classes {
                let _ = writeln!(s, "  {:?}: {}", e.class, e.evidence.as_deref().unwrap_or(""));
            }
        }
        if let Some(t) = &self.kpi_table {
            let _ = writeln!(s, "\nKPIs:\n{t}");
        }
        if let Some(i) = &self.interpretation {
            let _ = writeln!(s, "interpretation ({}):\n  {}", i.verdict.as_str(), i.summary);
            for f in &i.findings {
                let _ = writeln!(s, "  - {}: {} (cause: {}; recommendation: {})", f.metric, f.observation, f.hypothesized_cause, f.recommendation);
            }
        }
        s
    }
}
