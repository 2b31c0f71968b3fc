use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::results::{
    classify_errors, compute_kpis, parse_flowmonitor, parse_trace_metrics, read_pcap_summary, ErrorClass, ErrorKind,
    KpiSet, PcapSummary,
};
use crate::toolchain::{
    ExecutionOutcome, InvocationMethod, Payload, PayloadKind, PreparedPayload, Timings, ToolError, ToolInvocation,
    Toolchain,
};

use super::design::{Check, TestCase, TestCaseKind, TestSuite};
use super::generate::GeneratedScript;
use super::spec::SimulationSpec;
use super::AgentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileRecord {
    pub ok: bool,
    pub exit_status: i32,
    pub stdout: String,
    pub stderr: String,
    /// Staging plus compile.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check: Check,
    pub expected: Option<f64>,
    pub observed: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub kind: TestCaseKind,
    pub args: Vec<String>,
    /// `None` when the case never ran (compile failure).
    pub exit_status: Option<i32>,
    pub timed_out: bool,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
    /// Error classes only; an empty list means a clean run.
    pub errors: Vec<ErrorClass>,
    pub kpis: Option<KpiSet>,
    pub trace_metrics: BTreeMap<String, f64>,
    pub pcap: Option<PcapSummary>,
    pub artifacts: Vec<String>,
    pub stdout: String,
    pub stderr: String,
    pub timings: Timings,
}

impl CaseResult {
    /// Value of a report field referenced by a check.
    pub fn metric(&self, name: &str) -> Option<f64> {
        if let Some(t) = name.strip_prefix("trace.") {
            return self.trace_metrics.get(t).copied();
        }
        let agg = self.kpis.as_ref().and_then(|k| k.aggregate.as_ref());
        match name {
            "exit_status" => self.exit_status.map(f64::from),
            "timed_out" => Some(if self.timed_out { 1.0 } else { 0.0 }),
            "error_count" => Some(self.errors.len() as f64),
            "flows" => self.kpis.as_ref().map(|k| k.flows.len() as f64),
            "active_flows" => self.kpis.as_ref().map(|_| agg.map_or(0.0, |a| a.active_flows as f64)),
            "aggregate.throughput_bps" => agg.map(|a| a.throughput_bps),
            "aggregate.total_throughput_bps" => agg.map(|a| a.total_throughput_bps),
            "aggregate.mean_delay_s" => agg.and_then(|a| a.mean_delay_s),
            "aggregate.mean_jitter_s" => agg.and_then(|a| a.mean_jitter_s),
            "aggregate.loss_ratio" => agg.map(|a| a.loss_ratio),
            "aggregate.tx_packets" => agg.map(|a| a.tx_packets as f64),
            "aggregate.rx_packets" => agg.map(|a| a.rx_packets as f64),
            "pcap.packets" => self.pcap.map(|p| p.packets as f64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub iteration: u32,
    pub payload_kind: PayloadKind,
    pub method: InvocationMethod,
    pub compile: CompileRecord,
    pub cases: Vec<CaseResult>,
    /// KPIs of the first primary case that produced any.
    pub kpis: Option<KpiSet>,
    /// Distinct error classes across compile and all cases, first occurrence kept.
    pub error_classes: Vec<ErrorClass>,
    pub all_passed: bool,
    /// Compile plus every case run, seconds.
    pub tool_seconds: f64,
}

impl ExecutionReport {
    pub fn failed_cases(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

fn evaluate(case: &TestCase, spec: &SimulationSpec, result: &mut CaseResult) {
    result.checks = case
        .checks
        .iter()
        .map(|check| {
            let expected = check.value.resolve(spec);
            let observed = result.metric(&check.metric);
            let passed = matches!((observed, expected), (Some(o), Some(e)) if check.op.holds(o, e));
            CheckOutcome { check: check.clone(), expected, observed, passed }
        })
        .collect();
    result.passed = result.errors.is_empty() && result.checks.iter().all(|c| c.passed);
}

fn compile_errors(err: &ToolError) -> (CompileRecord, Vec<ErrorClass>) {
    match err {
        ToolError::CompileFailed { exit_status, stdout, stderr } => {
            let mut classes: Vec<ErrorClass> =
                classify_errors(stdout, stderr, *exit_status).into_iter().filter(ErrorClass::is_error).collect();
            if !classes.iter().any(|c| c.class == ErrorKind::CompileError) {
                let evidence = stderr
                    .lines()
                    .find(|l| !l.trim().is_empty())
                    .map(|l| l.trim().to_string())
                    .unwrap_or_else(|| format!("compiler exited with status {exit_status}"));
                classes.insert(
                    0,
                    ErrorClass { class: ErrorKind::CompileError, evidence: Some(evidence), rule_id: "compile-status".into() },
                );
            }
            let record = CompileRecord {
                ok: false,
                exit_status: *exit_status,
                stdout: stdout.clone(),
                stderr: stderr.clone(),
                seconds: 0.0,
            };
            (record, classes)
        }
        other => {
            let class = ErrorClass {
                class: ErrorKind::Timeout,
                evidence: Some(other.to_string()),
                rule_id: "compile-timeout".into(),
            };
            let record =
                CompileRecord { ok: false, exit_status: -1, stdout: String::new(), stderr: other.to_string(), seconds: 0.0 };
            (record, vec![class])
        }
    }
}

fn unavailable(e: ToolError) -> AgentError {
    AgentError::ToolchainUnavailable(e.to_string())
}

fn anomaly(rule: &str, evidence: String) -> ErrorClass {
    ErrorClass { class: ErrorKind::UnknownAnomaly, evidence: Some(evidence), rule_id: rule.into() }
}

/// Turns one run into evidence: KPIs, pcap counts, trace metrics, error classes.
fn collect(outcome: ExecutionOutcome, case: &TestCase, args: Vec<String>, spec: &SimulationSpec) -> CaseResult {
    let mut records = Vec::new();
    let mut saw_flowmon = false;
    let mut pcap: Option<PcapSummary> = None;
    let mut logs = String::new();
    let mut extra_errors = Vec::new();
    for a in &outcome.artifacts {
        let lower = a.name.to_ascii_lowercase();
        if lower.ends_with(".xml") {
            let text = String::from_utf8_lossy(&a.bytes);
            if !text.contains("<FlowMonitor") {
                continue;
            }
            saw_flowmon = true;
            match parse_flowmonitor(&text) {
                Ok(mut r) => records.append(&mut r),
                Err(e) => extra_errors.push(anomaly("flowmon-parse", format!("{}: {e}", a.name))),
            }
        } else if lower.ends_with(".pcap") {
            match read_pcap_summary(&a.bytes) {
                Ok(s) => {
                    let p = pcap.get_or_insert(PcapSummary { packets: 0, bytes: 0, ..s });
                    p.packets += s.packets;
                    p.bytes += s.bytes;
                }
                Err(e) => extra_errors.push(anomaly("pcap-parse", format!("{}: {e}", a.name))),
            }
        } else if lower.ends_with(".log") {
            logs.push_str(&String::from_utf8_lossy(&a.bytes));
            logs.push('\n');
        }
    }
    let kpis = if saw_flowmon {
        match compute_kpis(&records) {
            Ok(k) => Some(k),
            Err(e) => {
                extra_errors.push(anomaly("kpi-degenerate", e.to_string()));
                None
            }
        }
    } else {
        None
    };
    let classify_stdout = if logs.is_empty() { outcome.stdout.clone() } else { format!("{}\n{logs}", outcome.stdout) };
    let mut errors: Vec<ErrorClass> = classify_errors(&classify_stdout, &outcome.stderr, outcome.exit_status)
        .into_iter()
        .filter(ErrorClass::is_error)
        .collect();
    for e in extra_errors {
        if !errors.iter().any(|x| x.class == e.class) {
            errors.push(e);
        }
    }
    let mut result = CaseResult {
        case_id: case.case_id.clone(),
        kind: case.kind,
        args,
        exit_status: Some(outcome.exit_status),
        timed_out: outcome.timed_out,
        passed: false,
        checks: Vec::new(),
        errors,
        kpis,
        trace_metrics: parse_trace_metrics(&outcome.stdout),
        pcap,
        artifacts: outcome.artifacts.iter().map(|a| a.name.clone()).collect(),
        stdout: outcome.stdout,
        stderr: outcome.stderr,
        timings: outcome.timings,
    };
    evaluate(case, spec, &mut result);
    result
}

fn run_case(
    toolchain: &Toolchain,
    prepared: &PreparedPayload,
    case: &TestCase,
    spec: &SimulationSpec,
    method: InvocationMethod,
) -> Result<CaseResult, AgentError> {
    let effective = spec.with_overrides(&case.overrides).map_err(AgentError::InvalidSuite)?;
    let args = effective.to_args(&case.case_id);
    let inv = ToolInvocation { method, args: args.clone(), limits: None };
    let outcome = toolchain.run_prepared(prepared, &inv).map_err(unavailable)?;
    Ok(collect(outcome, case, args, &effective))
}

fn merge_classes(into: &mut Vec<ErrorClass>, from: &[ErrorClass]) {
    for e in from {
        if !into.iter().any(|x| x.class == e.class) {
            into.push(e.clone());
        }
    }
}

/// Compiles the script once, runs it once per test case with the case's
/// overrides as command-line arguments, and gathers the evidence. Case
/// failures are data; only an unusable toolchain is an error.
pub fn execute_and_collect(
    script: &GeneratedScript,
    suite: &TestSuite,
    spec: &SimulationSpec,
    toolchain: &Toolchain,
    method: InvocationMethod,
    execution: Execution,
) -> Result<ExecutionReport, AgentError> {
    suite.validate(spec)?;
    let started = Instant::now();
    let payload = Payload { kind: script.payload_kind, source: &script.source_text };
    let mut error_classes = Vec::new();
    let (compile, cases) = match toolchain.prepare(payload) {
        Ok(prepared) => {
            let compile = CompileRecord {
                ok: true,
                exit_status: prepared.compile.as_ref().map_or(0, |c| c.exit_status),
                stdout: prepared.compile.as_ref().map(|c| c.stdout.clone()).unwrap_or_default(),
                stderr: prepared.compile.as_ref().map(|c| c.stderr.clone()).unwrap_or_default(),
                seconds: prepared.setup_seconds,
            };
            let cases = execution.try_map(&suite.cases, |case| run_case(toolchain, &prepared, case, spec, method))?;
            (compile, cases)
        }
        Err(e @ (ToolError::CompileFailed { .. } | ToolError::Timeout { .. })) => {
            let (mut compile, classes) = compile_errors(&e);
            compile.seconds = started.elapsed().as_secs_f64();
            let cases = suite
                .cases
                .iter()
                .map(|case| {
                    let effective = spec.with_overrides(&case.overrides).map_err(AgentError::InvalidSuite)?;
                    let mut r = CaseResult {
                        case_id: case.case_id.clone(),
                        kind: case.kind,
                        args: effective.to_args(&case.case_id),
                        exit_status: None,
                        timed_out: false,
                        passed: false,
                        checks: Vec::new(),
                        errors: classes.clone(),
                        kpis: None,
                        trace_metrics: BTreeMap::new(),
                        pcap: None,
                        artifacts: Vec::new(),
                        stdout: String::new(),
                        stderr: String::new(),
                        timings: Timings::default(),
                    };
                    evaluate(case, &effective, &mut r);
                    Ok(r)
                })
                .collect::<Result<Vec<_>, AgentError>>()?;
            (compile, cases)
        }
        Err(e) => return Err(unavailable(e)),
    };
    for c in &cases {
        merge_classes(&mut error_classes, &c.errors);
    }
    let kpis = cases
        .iter()
        .filter(|c| c.kind == TestCaseKind::Primary)
        .find_map(|c| c.kpis.clone());
    let tool_seconds = compile.seconds + cases.iter().map(|c| c.timings.total).sum::<f64>();
    let all_passed = cases.iter().all(|c| c.passed) && error_classes.is_empty();
    Ok(ExecutionReport {
        iteration: script.iteration,
        payload_kind: script.payload_kind,
        method,
        compile,
        cases,
        kpis,
        error_classes,
        all_passed,
        tool_seconds,
    })
}
