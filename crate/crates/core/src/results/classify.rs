use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Written into stderr by the toolchain when it kills a run at its wall timeout.
pub const TIMEOUT_MARKER: &str = "[toolchain] killed after exceeding wall timeout";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    CompileError,
    RuntimeCrash,
    AssertionFailure,
    Timeout,
    UnknownAnomaly,
    NoError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorClass {
    pub class: ErrorKind,
    /// Matched log excerpt; `None` only for `NoError`.
    pub evidence: Option<String>,
    pub rule_id: String,
}

impl ErrorClass {
    pub fn is_error(&self) -> bool {
        self.class != ErrorKind::NoError
    }
}

struct Rule {
    id: &'static str,
    class: ErrorKind,
    pattern: Regex,
}

fn rule(id: &'static str, class: ErrorKind, pattern: &str) -> Rule {
    Rule { id, class, pattern: Regex::new(pattern).expect("static rule pattern") }
}

// Evaluated per line, first match wins. Order matters: compiler diagnostics
// before generic exception lines, assertion signatures before crash markers.
static LINE_RULES: LazyLock<Vec<Rule>> = LazyLock::new(|| {
    use ErrorKind::*;
    vec![
        rule("timeout-marker", Timeout, &regex::escape(TIMEOUT_MARKER)),
        rule("cc-diagnostic", CompileError, r"\b(?:fatal )?error: "),
        rule("ld-undefined", CompileError, r"undefined reference to|ld returned \d+ exit status"),
        rule("cmake-error", CompileError, r"^CMake Error|ninja: build stopped"),
        rule("py-syntax", CompileError, r"^\s*(?:SyntaxError|IndentationError|TabError): "),
        rule("ns3-assert", AssertionFailure, r"assert failed\. cond=|NS_ASSERT failed|aborted\. cond="),
        rule("libc-assert", AssertionFailure, r"Assertion `.*' failed"),
        rule("py-assert", AssertionFailure, r"^\s*AssertionError\b"),
        rule("segfault", RuntimeCrash, r"Segmentation fault|SIGSEGV"),
        rule("abort", RuntimeCrash, r"Aborted \(core dumped\)|Bus error"),
        rule("cpp-terminate", RuntimeCrash, r"terminate called (?:after throwing|without an active exception)"),
        rule("ns3-fatal", RuntimeCrash, r"NS_FATAL, terminating|msg=.*file=.*line="),
        rule("py-exception", RuntimeCrash, r"^\s*[A-Za-z_][\w.]*(?:Error|Exception): "),
    ]
});

fn excerpt(line: &str) -> String {
    let t = line.trim();
    if t.chars().count() > 240 {
        t.chars().take(240).collect::<String>() + "…"
    } else {
        t.to_string()
    }
}

/// Deterministic log classification. Each line is tagged by the first matching
/// rule; classes are reported once, in order of first appearance (stderr
/// before stdout). Exit-status rules apply only when no line matched.
pub fn classify_errors(stdout: &str, stderr: &str, exit_status: i32) -> Vec<ErrorClass> {
    let mut out: Vec<ErrorClass> = Vec::new();
    for line in stderr.lines().chain(stdout.lines()) {
        if let Some(r) = LINE_RULES.iter().find(|r| r.pattern.is_match(line)) {
            if !out.iter().any(|c| c.class == r.class) {
                out.push(ErrorClass { class: r.class, evidence: Some(excerpt(line)), rule_id: r.id.into() });
            }
        }
    }
    if !out.is_empty() {
        return out;
    }
    let by_status = match exit_status {
        0 => None,
        139 | -11 => Some((ErrorKind::RuntimeCrash, "exit-sigsegv")),
        124 => Some((ErrorKind::Timeout, "exit-timeout")),
        _ => Some((ErrorKind::UnknownAnomaly, "nonzero-exit")),
    };
    match by_status {
        Some((class, id)) => vec![ErrorClass {
            class,
            evidence: Some(format!("exit status {exit_status}")),
            rule_id: id.into(),
        }],
        None => vec![ErrorClass { class: ErrorKind::NoError, evidence: None, rule_id: "clean".into() }],
    }
}
