use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::generate::GeneratedScript;
use super::prompts::DESIGN_TESTS;
use super::spec::{SimulationSpec, KNOWN_KEYS};
use super::{fenced_blocks, render_context, AgentContext, AgentError};

/// Report fields a check may reference. `trace.<name>` reads a `KPI name=value`
/// line printed by the payload.
pub const METRICS: [&str; 13] = [
    "exit_status",
    "timed_out",
    "error_count",
    "flows",
    "active_flows",
    "aggregate.throughput_bps",
    "aggregate.total_throughput_bps",
    "aggregate.mean_delay_s",
    "aggregate.mean_jitter_s",
    "aggregate.loss_ratio",
    "aggregate.tx_packets",
    "aggregate.rx_packets",
    "pcap.packets",
];

pub(crate) fn metric_is_known(name: &str) -> bool {
    if let Some(trace) = name.strip_prefix("trace.") {
        return !trace.is_empty() && trace.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    }
    METRICS.contains(&name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestCaseKind {
    Primary,
    Edge,
    Scalability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl Cmp {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
            Cmp::Eq => lhs == rhs,
            Cmp::Ne => lhs != rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Eq => "==",
            Cmp::Ne => "!=",
        }
    }
}

/// Right-hand side: a literal, or a numeric spec field resolved against the
/// case's effective spec (overrides applied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CheckValue {
    Number(f64),
    Field(String),
}

impl CheckValue {
    pub fn resolve(&self, spec: &SimulationSpec) -> Option<f64> {
        match self {
            CheckValue::Number(n) => Some(*n),
            CheckValue::Field(f) => spec.numeric(f),
        }
    }
}

impl fmt::Display for CheckValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckValue::Number(n) => write!(f, "{n}"),
            CheckValue::Field(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub metric: String,
    pub op: Cmp,
    pub value: CheckValue,
}

impl Check {
    pub fn new(metric: &str, op: Cmp, value: CheckValue) -> Self {
        Self { metric: metric.to_string(), op, value }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.metric, self.op.symbol(), self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseOrigin {
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    pub kind: TestCaseKind,
    pub description: String,
    /// All must hold for the case to pass.
    pub checks: Vec<Check>,
    /// Spec fields changed for this case, in key-value form.
    pub overrides: BTreeMap<String, String>,
    pub origin: CaseOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub cases: Vec<TestCase>,
    /// Reasons LLM proposals were rejected.
    #[serde(default)]
    pub dropped: Vec<String>,
}

fn validate_case(case: &TestCase, spec: &SimulationSpec) -> Result<(), String> {
    if case.case_id.trim().is_empty() {
        return Err("empty case_id".into());
    }
    if case.checks.is_empty() {
        return Err(format!("{}: no checks", case.case_id));
    }
    for c in &case.checks {
        if !metric_is_known(&c.metric) {
            return Err(format!("{}: unknown metric {}", case.case_id, c.metric));
        }
        if let CheckValue::Field(f) = &c.value {
            if spec.numeric(f).is_none() {
                return Err(format!("{}: {f} is not a numeric spec field", case.case_id));
            }
        }
        if let CheckValue::Number(n) = c.value {
            if !n.is_finite() {
                return Err(format!("{}: non-finite threshold", case.case_id));
            }
        }
    }
    spec.with_overrides(&case.overrides).map_err(|e| format!("{}: override {e}", case.case_id))?;
    Ok(())
}

impl TestSuite {
    /// Suite invariants: at least one primary case, unique ids, valid checks
    /// and overrides.
    pub fn validate(&self, spec: &SimulationSpec) -> Result<(), AgentError> {
        if !self.cases.iter().any(|c| c.kind == TestCaseKind::Primary) {
            return Err(AgentError::InvalidSuite("no primary case".into()));
        }
        let mut ids = BTreeSet::new();
        for c in &self.cases {
            if !ids.insert(c.case_id.as_str()) {
                return Err(AgentError::InvalidSuite(format!("duplicate case id {}", c.case_id)));
            }
            validate_case(c, spec).map_err(AgentError::InvalidSuite)?;
        }
        Ok(())
    }

    pub fn get(&self, case_id: &str) -> Option<&TestCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }
}

/// The rule-based cases every suite starts with.
pub fn mandatory_cases(spec: &SimulationSpec) -> Vec<TestCase> {
    use CheckValue::{Field, Number};
    let rule = |id: &str, kind, description: &str, checks: Vec<Check>, overrides: &[(&str, String)]| TestCase {
        case_id: id.to_string(),
        kind,
        description: description.to_string(),
        checks,
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        origin: CaseOrigin::Rule,
    };
    let clean = || vec![Check::new("exit_status", Cmp::Eq, Number(0.0)), Check::new("error_count", Cmp::Eq, Number(0.0))];
    let mut attach = clean();
    attach.push(Check::new("trace.attached_ues", Cmp::Ge, Field("num_ues".into())));
    let mut flow = clean();
    flow.push(Check::new("active_flows", Cmp::Ge, Number(1.0)));
    let mut qos = clean();
    qos.push(Check::new("aggregate.mean_delay_s", Cmp::Le, Number(spec.qos.max_mean_delay_s)));
    qos.push(Check::new("aggregate.loss_ratio", Cmp::Le, Number(spec.qos.max_loss_ratio)));
    let mut edge = clean();
    edge.push(Check::new("active_flows", Cmp::Ge, Number(1.0)));
    let scale = |pct: u32| {
        let ues = (u64::from(spec.num_ues) * u64::from(pct)).div_ceil(100).max(u64::from(spec.num_ues) + 1);
        let mut checks = clean();
        checks.push(Check::new("trace.attached_ues", Cmp::Ge, Field("num_ues".into())));
        checks.push(Check::new("active_flows", Cmp::Ge, Number(1.0)));
        rule(
            &format!("scale-ues-{pct}pct"),
            TestCaseKind::Scalability,
            &format!("increase the UE count to {ues} and keep every UE attached"),
            checks,
            &[("num_ues", ues.to_string())],
        )
    };
    vec![
        rule("attach", TestCaseKind::Primary, "every UE attaches to a gNB", attach, &[]),
        rule("data-flow", TestCaseKind::Primary, "at least one flow delivers packets", flow, &[]),
        rule("qos", TestCaseKind::Primary, "mean delay and loss stay within the QoS thresholds", qos, &[]),
        rule(
            "edge-high-mobility",
            TestCaseKind::Edge,
            "UEs move at 30 m/s; the simulation stays stable and traffic still flows",
            edge,
            &[("mobility_model", "ConstantVelocityMobilityModel,speed=30".into())],
        ),
        scale(150),
        scale(200),
    ]
}

#[derive(Debug, Deserialize)]
struct Proposal {
    case_id: String,
    kind: TestCaseKind,
    #[serde(default)]
    description: String,
    checks: Vec<Check>,
    #[serde(default)]
    overrides: BTreeMap<String, serde_json::Value>,
}

fn proposals(reply: &str) -> Result<Vec<serde_json::Value>, String> {
    let blocks = fenced_blocks(reply);
    let body = blocks
        .iter()
        .find(|(t, _)| t == "json")
        .or_else(|| blocks.first())
        .map(|(_, b)| b.as_str())
        .unwrap_or(reply);
    match serde_json::from_str::<serde_json::Value>(body.trim()) {
        Ok(serde_json::Value::Array(items)) => Ok(items),
        Ok(other @ serde_json::Value::Object(_)) => Ok(vec![other]),
        Ok(_) => Err("reply is not a JSON array".into()),
        Err(e) => Err(format!("reply is not JSON: {e}")),
    }
}

fn to_case(value: serde_json::Value) -> Result<TestCase, String> {
    let p: Proposal = serde_json::from_value(value).map_err(|e| format!("bad proposal: {e}"))?;
    let overrides = p
        .overrides
        .into_iter()
        .map(|(k, v)| {
            let v = match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            (k, v)
        })
        .collect();
    Ok(TestCase {
        case_id: p.case_id.trim().to_string(),
        kind: p.kind,
        description: p.description,
        checks: p.checks,
        overrides,
        origin: CaseOrigin::Llm,
    })
}

/// Builds the suite: mandatory rule cases first, then LLM proposals that pass
/// validation. Rejected proposals are logged and listed in `dropped`.
pub fn design_tests(
    spec: &SimulationSpec,
    script: &GeneratedScript,
    ctx: &mut AgentContext<'_>,
) -> Result<TestSuite, AgentError> {
    let mut suite = TestSuite { cases: mandatory_cases(spec), dropped: Vec::new() };
    let existing = suite
        .cases
        .iter()
        .map(|c| {
            let checks = c.checks.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
            format!("- {} ({:?}): {checks}", c.case_id, c.kind).to_lowercase()
        })
        .collect::<Vec<_>>()
        .join("\n");
    let query = format!("ns-3 {} test validation attachment throughput {}", script.payload_kind.as_str(), spec.scenario);
    let hits = ctx.retrieve(&query);
    let metrics = format!("{}, trace.<name>", METRICS.join(", "));
    let spec_text = spec.to_kv();
    let context = render_context(&hits);
    let messages = ctx.prompts.render(
        DESIGN_TESTS,
        &[
            ("spec", spec_text.trim_end()),
            ("existing", &existing),
            ("context", &context),
            ("metrics", &metrics),
            ("fields", &KNOWN_KEYS.join(", ")),
        ],
    )?;
    let reply = ctx.chat("design", messages)?;
    let items = match proposals(&reply) {
        Ok(items) => items,
        Err(reason) => {
            tracing::warn!(%reason, "ignoring test proposals");
            suite.dropped.push(reason);
            Vec::new()
        }
    };
    for item in items {
        let verdict = to_case(item).and_then(|case| {
            validate_case(&case, spec)?;
            if suite.get(&case.case_id).is_some() {
                return Err(format!("{}: duplicate case id", case.case_id));
            }
            Ok(case)
        });
        match verdict {
            Ok(case) => suite.cases.push(case),
            Err(reason) => {
                tracing::warn!(%reason, "dropping proposed test case");
                suite.dropped.push(reason);
            }
        }
    }
    suite.validate(spec)?;
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentSettings, PromptLibrary, Transport};
    use crate::llm_gateway::{HashEmbedder, ScriptedProvider};
    use crate::toolchain::PayloadKind;
    use proptest::prelude::*;

    fn script() -> GeneratedScript {
        GeneratedScript {
            payload_kind: PayloadKind::Cpp,
            source_text: "int main(){}".into(),
            iteration: 1,
            prompt_fingerprint: "0".repeat(64),
            retrieved_chunk_ids: vec![],
            rationale: String::new(),
        }
    }

    fn design(spec: &SimulationSpec, reply: &str) -> TestSuite {
        let provider = ScriptedProvider::from_replies([reply]).unwrap();
        let embedder = HashEmbedder::new(16);
        let prompts = PromptLibrary::builtin();
        let settings = AgentSettings::default();
        let mut ctx = AgentContext::new(&provider, &embedder, None, &prompts, &settings);
        design_tests(spec, &script(), &mut ctx).unwrap()
    }

    #[test]
    fn case_study_has_scaled_case() {
        let s = design(&SimulationSpec::case_study(), "```json\n[]\n```");
        let scaled: Vec<u32> = s
            .cases
            .iter()
            .filter(|c| c.kind == TestCaseKind::Scalability)
            .map(|c| c.overrides["num_ues"].parse().unwrap())
            .collect();
        assert_eq!(scaled, vec![150, 200]);
        assert!(s.cases.iter().any(|c| c.kind == TestCaseKind::Edge));
    }

    #[test]
    fn bad_proposals_are_dropped() {
        let reply = r#"```json
[
 {"case_id": "sinr", "kind": "primary", "checks": [{"metric": "aggregate.sinr_db", "op": ">", "value": 5}]},
 {"case_id": "two-gnb", "kind": "edge", "checks": [{"metric": "exit_status", "op": "==", "value": 0}], "overrides": {"num_gnbs": 2}},
 {"case_id": "attach", "kind": "primary", "checks": [{"metric": "flows", "op": ">=", "value": 1}]},
 {"case_id": "bad-override", "kind": "edge", "checks": [{"metric": "flows", "op": ">=", "value": 1}], "overrides": {"num_ues": 0}},
 {"kind": "edge"}
]
```"#;
        let s = design(&SimulationSpec::case_study(), reply);
        assert_eq!(s.dropped.len(), 4);
        let llm: Vec<&str> = s.cases.iter().filter(|c| c.origin == CaseOrigin::Llm).map(|c| c.case_id.as_str()).collect();
        assert_eq!(llm, vec!["two-gnb"]);
        assert!(s.validate(&SimulationSpec::case_study()).is_ok());
    }

    #[test]
    fn unparseable_reply_keeps_mandatory_cases() {
        let s = design(&SimulationSpec::case_study(), "no json at all");
        assert_eq!(s.cases.len(), 6);
        assert_eq!(s.dropped.len(), 1);
    }

    #[test]
    fn empty_suite_is_invalid() {
        let e = TestSuite { cases: vec![], dropped: vec![] }.validate(&SimulationSpec::case_study());
        assert!(matches!(e, Err(AgentError::InvalidSuite(_))));
    }

    fn arb_spec() -> impl Strategy<Value = SimulationSpec> {
        (1u32..5000, 1u32..20, 0.5f64..100.0, 1.0f64..800.0, any::<bool>(), any::<bool>()).prop_map(|(ues, gnbs, f, bw, tcp, bf)| {
            let mut s = SimulationSpec::case_study();
            s.num_ues = ues;
            s.num_gnbs = gnbs;
            s.carrier_frequency_ghz = f;
            s.bandwidth_mhz = bw;
            s.transport_protocol = if tcp { Transport::Tcp } else { Transport::Udp };
            s.beamforming_enabled = bf;
            s
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn suite_completeness(spec in arb_spec()) {
            let s = design(&spec, "```json\n[]\n```");
            prop_assert!(s.validate(&spec).is_ok());
            let has = |pred: &dyn Fn(&TestCase) -> bool| s.cases.iter().any(pred);
            prop_assert!(has(&|c| c.checks.iter().any(|k| k.metric == "trace.attached_ues")));
            prop_assert!(has(&|c| c.checks.iter().any(|k| k.metric == "active_flows")));
            prop_assert!(has(&|c| c.checks.iter().any(|k| k.metric == "aggregate.loss_ratio")));
            prop_assert!(has(&|c| c.kind == TestCaseKind::Edge));
            prop_assert!(has(&|c| c.kind == TestCaseKind::Scalability
                && c.overrides.get("num_ues").and_then(|v| v.parse::<u32>().ok()).is_some_and(|n| n > spec.num_ues)));
        }
    }
}
