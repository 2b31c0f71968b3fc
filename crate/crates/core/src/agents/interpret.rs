use serde::{Deserialize, Serialize};

use super::execute::ExecutionReport;
use super::prompts::{INTERPRET, REPAIR_INTERPRETATION};
use super::spec::SimulationSpec;
use super::{fenced_blocks, AgentContext, AgentError, ChatMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    MeetsCriteria,
    NeedsRefinement,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::MeetsCriteria => "meets_criteria",
            Verdict::NeedsRefinement => "needs_refinement",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub metric: String,
    pub observation: String,
    pub hypothesized_cause: String,
    pub recommendation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationReport {
    pub summary: String,
    pub findings: Vec<Finding>,
    pub verdict: Verdict,
    /// What the model itself concluded.
    pub llm_verdict: Verdict,
    /// True when the evidence rule replaced the model's verdict.
    pub overridden: bool,
}

fn parse_finding(text: &str) -> Result<Finding, String> {
    let mut f = Finding {
        metric: String::new(),
        observation: String::new(),
        hypothesized_cause: String::new(),
        recommendation: String::new(),
    };
    for part in text.split('|') {
        let Some((k, v)) = part.split_once('=') else {
            if part.trim().is_empty() {
                continue;
            }
            return Err(format!("finding part {:?} is not key=value", part.trim()));
        };
        let v = v.trim().to_string();
        match k.trim().to_ascii_lowercase().as_str() {
            "metric" => f.metric = v,
            "observation" => f.observation = v,
            "cause" | "hypothesized_cause" => f.hypothesized_cause = v,
            "recommendation" => f.recommendation = v,
            other => return Err(format!("unknown finding field {other:?}")),
        }
    }
    if f.metric.is_empty() || f.observation.is_empty() {
        return Err("finding needs at least metric and observation".into());
    }
    Ok(f)
}

/// Parses an interpretation reply. Returns `(summary, verdict, findings)`.
pub fn parse_interpretation(reply: &str) -> Result<(String, Verdict, Vec<Finding>), String> {
    let blocks = fenced_blocks(reply);
    let body = blocks
        .iter()
        .find(|(t, _)| t == "interpretation")
        .or_else(|| blocks.first())
        .map(|(_, b)| b.as_str())
        .unwrap_or(reply);
    let mut summary: Option<String> = None;
    let mut verdict = None;
    let mut findings = Vec::new();
    let mut in_summary = false;
    for line in body.lines() {
        let t = line.trim();
        let lower = t.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("summary:") {
            let start = t.len() - rest.len();
            summary = Some(t[start..].trim().to_string());
            in_summary = true;
        } else if let Some(rest) = lower.strip_prefix("verdict:") {
            in_summary = false;
            verdict = Some(match rest.trim().trim_matches('`') {
                "meets_criteria" => Verdict::MeetsCriteria,
                "needs_refinement" => Verdict::NeedsRefinement,
                other => return Err(format!("unknown verdict {other:?}")),
            });
        } else if lower.starts_with("finding:") {
            in_summary = false;
            findings.push(parse_finding(&t["finding:".len()..])?);
        } else if in_summary && !t.is_empty() {
            let s = summary.get_or_insert_with(String::new);
            s.push(' ');
            s.push_str(t);
        }
    }
    let summary = summary.filter(|s| !s.is_empty()).ok_or("missing summary line")?;
    let verdict = verdict.ok_or("missing verdict line")?;
    if verdict == Verdict::NeedsRefinement && findings.is_empty() {
        return Err("needs_refinement requires at least one finding".into());
    }
    Ok((summary, verdict, findings))
}

fn cases_table(report: &ExecutionReport) -> String {
    report
        .cases
        .iter()
        .map(|c| {
            let failed: Vec<String> = c
                .checks
                .iter()
                .filter(|k| !k.passed)
                .map(|k| {
                    let obs = k.observed.map_or("n/a".to_string(), |v| format!("{v}"));
                    format!("{} observed {obs}", k.check)
                })
                .collect();
            let status = if c.passed { "PASS" } else { "FAIL" };
            if failed.is_empty() {
                format!("- {} ({:?}): {status}", c.case_id, c.kind)
            } else {
                format!("- {} ({:?}): {status}; {}", c.case_id, c.kind, failed.join("; "))
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn errors_table(report: &ExecutionReport) -> String {
    if report.error_classes.is_empty() {
        return "(none)".into();
    }
    report
        .error_classes
        .iter()
        .map(|e| format!("- {:?} [{}]: {}", e.class, e.rule_id, e.evidence.as_deref().unwrap_or("")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Findings derived from the report alone, used when the model gave none
/// but the verdict had to be forced.
fn synthesized_findings(report: &ExecutionReport) -> Vec<Finding> {
    let mut out: Vec<Finding> = report
        .error_classes
        .iter()
        .map(|e| Finding {
            metric: "errors".into(),
            observation: format!("{:?} detected by rule {}", e.class, e.rule_id),
            hypothesized_cause: e.evidence.clone().unwrap_or_default(),
            recommendation: "fix the reported error before further tuning".into(),
        })
        .collect();
    for c in report.failed_cases() {
        for k in c.checks.iter().filter(|k| !k.passed) {
            out.push(Finding {
                metric: k.check.metric.clone(),
                observation: format!(
                    "case {} expected {} but observed {}",
                    c.case_id,
                    k.check,
                    k.observed.map_or("nothing".to_string(), |v| v.to_string())
                ),
                hypothesized_cause: "threshold not met".into(),
                recommendation: "revise the simulation setup for this case".into(),
            });
        }
    }
    if out.is_empty() {
        out.push(Finding {
            metric: "cases".into(),
            observation: "not every test case passed".into(),
            hypothesized_cause: "see case results".into(),
            recommendation: "inspect failing cases".into(),
        });
    }
    out
}

/// Asks the model to explain the results. The verdict can only be
/// `meets_criteria` when every case passed and no error class was seen.
pub fn interpret_results(
    report: &ExecutionReport,
    spec: &SimulationSpec,
    ctx: &mut AgentContext<'_>,
) -> Result<InterpretationReport, AgentError> {
    let kpis = report.kpis.as_ref().map_or("(no KPIs were produced)".to_string(), |k| k.table());
    let spec_text = spec.to_kv();
    let cases = cases_table(report);
    let errors = errors_table(report);
    let mut messages = ctx.prompts.render(
        INTERPRET,
        &[("spec", spec_text.trim_end()), ("kpis", kpis.trim_end()), ("cases", &cases), ("errors", &errors)],
    )?;
    let reply = ctx.chat("interpret", messages.clone())?;
    let parsed = match parse_interpretation(&reply) {
        Ok(p) => p,
        Err(reason) => {
            messages.push(ChatMessage::assistant(reply));
            messages.extend(ctx.prompts.render(REPAIR_INTERPRETATION, &[("reason", &reason)])?);
            let again = ctx.chat("interpret", messages)?;
            parse_interpretation(&again).map_err(AgentError::MalformedInterpretation)?
        }
    };
    let (summary, llm_verdict, mut findings) = parsed;
    let evidence_clean = report.all_passed && report.error_classes.is_empty() && report.cases.iter().all(|c| c.passed);
    let verdict = if evidence_clean { llm_verdict } else { Verdict::NeedsRefinement };
    if verdict == Verdict::NeedsRefinement && findings.is_empty() {
        findings = synthesized_findings(report);
    }
    Ok(InterpretationReport { summary, findings, verdict, llm_verdict, overridden: verdict != llm_verdict })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::execute::{CaseResult, CompileRecord};
    use crate::agents::{AgentSettings, PromptLibrary, TestCaseKind};
    use crate::llm_gateway::{HashEmbedder, ScriptedProvider};
    use crate::toolchain::{InvocationMethod, PayloadKind, Timings};
    use std::collections::BTreeMap;

    fn report(pass: bool) -> ExecutionReport {
        let case = CaseResult {
            case_id: "qos".into(),
            kind: TestCaseKind::Primary,
            args: vec![],
            exit_status: Some(0),
            timed_out: false,
            passed: pass,
            checks: vec![],
            errors: vec![],
            kpis: None,
            trace_metrics: BTreeMap::new(),
            pcap: None,
            artifacts: vec![],
            stdout: String::new(),
            stderr: String::new(),
            timings: Timings::default(),
        };
        ExecutionReport {
            iteration: 1,
            payload_kind: PayloadKind::Cpp,
            method: InvocationMethod::Native,
            compile: CompileRecord { ok: true, exit_status: 0, stdout: String::new(), stderr: String::new(), seconds: 0.0 },
            cases: vec![case],
            kpis: None,
            error_classes: vec![],
            all_passed: pass,
            tool_seconds: 0.0,
        }
    }

    fn interpret(r: &ExecutionReport, replies: &[&str]) -> (Result<InterpretationReport, AgentError>, usize) {
        let provider = ScriptedProvider::from_replies(replies.iter().copied()).unwrap();
        let embedder = HashEmbedder::new(8);
        let prompts = PromptLibrary::builtin();
        let settings = AgentSettings::default();
        let mut ctx = AgentContext::new(&provider, &embedder, None, &prompts, &settings);
        (interpret_results(r, &SimulationSpec::case_study(), &mut ctx), provider.consumed())
    }

    const APPROVE: &str = "```interpretation\nsummary: All UEs attached and throughput is stable.\nverdict: meets_criteria\n```";

    #[test]
    fn approval_kept_when_evidence_is_clean() {
        let (r, _) = interpret(&report(true), &[APPROVE]);
        let r = r.unwrap();
        assert_eq!(r.verdict, Verdict::MeetsCriteria);
        assert!(!r.overridden);
    }

    #[test]
    fn approval_forced_down_on_failure() {
        let (r, _) = interpret(&report(false), &[APPROVE]);
        let r = r.unwrap();
        assert_eq!(r.verdict, Verdict::NeedsRefinement);
        assert!(r.overridden);
        assert!(!r.findings.is_empty());
    }

    #[test]
    fn delay_loss_finding_parsed() {
        let reply = "```interpretation\nsummary: Delay rises under heavy load.\nverdict: needs_refinement\nfinding: metric=mean_delay | observation=The increase in delay correlates with a higher packet loss rate | cause=losses at the physical layer | recommendation=adjust the beamforming method or add a gNB\n```";
        let (r, _) = interpret(&report(false), &[reply]);
        let f = &r.unwrap().findings[0];
        assert_eq!(f.metric, "mean_delay");
        assert!(f.observation.contains("correlates with a higher packet loss rate"));
        assert_eq!(f.recommendation, "adjust the beamforming method or add a gNB");
    }

    #[test]
    fn one_repair_then_error() {
        let (r, used) = interpret(&report(true), &["looks fine", APPROVE]);
        assert!(r.is_ok());
        assert_eq!(used, 2);
        let (r, used) = interpret(&report(true), &["looks fine", "still fine", APPROVE]);
        assert!(matches!(r, Err(AgentError::MalformedInterpretation(_))));
        assert_eq!(used, 2);
    }

    #[test]
    fn parser_rules() {
        assert!(parse_interpretation("summary: x\nverdict: needs_refinement\n").is_err());
        assert!(parse_interpretation("summary: x\nverdict: great\n").is_err());
        let (s, v, _) = parse_interpretation("summary: first\n  second\nverdict: meets_criteria\n").unwrap();
        assert_eq!(s, "first second");
        assert_eq!(v, Verdict::MeetsCriteria);
    }
}
