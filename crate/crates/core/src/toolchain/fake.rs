//! Test double for the ns-3 build and run steps.
//!
//! The fake still goes through real subprocesses: compile and run are small
//! `sh` scripts generated from the configured behaviour, so staging, timeouts,
//! capture and artifact collection are the same code the real path uses.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ToolError;

/// Single-flow FlowMonitor output: 1 Mbit/s, 20 ms mean delay, 10 ms jitter, 5 % loss.
pub const SAMPLE_FLOWMON_XML: &str = r#"<?xml version="1.0" ?>
<FlowMonitor>
  <FlowStats>
    <Flow flowId="1" timeFirstTxPacket="+0ns" timeFirstRxPacket="+2e7ns" timeLastTxPacket="+9.8e8ns" timeLastRxPacket="+1e9ns" delaySum="+1.9e9ns" jitterSum="+9.4e8ns" lastDelay="+2e7ns" txBytes="130000" rxBytes="125000" txPackets="100" rxPackets="95" lostPackets="5" timesForwarded="0">
    </Flow>
  </FlowStats>
  <Ipv4FlowClassifier>
    <Flow flowId="1" sourceAddress="1.0.0.2" destinationAddress="7.0.0.2" protocol="6" sourcePort="49153" destinationPort="10000" />
  </Ipv4FlowClassifier>
</FlowMonitor>
"#;

/// Single flow within the default QoS thresholds: 1.0296 Mbit/s, 20 ms delay,
/// 10 ms jitter, 1 % loss. Default output of the fake simulator.
pub const HEALTHY_FLOWMON_XML: &str = r#"<?xml version="1.0" ?>
<FlowMonitor>
  <FlowStats>
    <Flow flowId="1" timeFirstTxPacket="+0ns" timeFirstRxPacket="+2e7ns" timeLastTxPacket="+9.8e8ns" timeLastRxPacket="+1e9ns" delaySum="+1.98e9ns" jitterSum="+9.8e8ns" lastDelay="+2e7ns" txBytes="130000" rxBytes="128700" txPackets="100" rxPackets="99" lostPackets="1" timesForwarded="0">
    </Flow>
  </FlowStats>
</FlowMonitor>
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FakeBehavior {
    pub sleep_s: f64,
    pub exit_code: i32,
    /// `{name}` is replaced with the value of a `--name=value` run argument.
    pub stdout: String,
    pub stderr: String,
    /// Written to `flowmon.xml` in the run directory when present.
    pub flowmon_xml: Option<String>,
    /// Additional files to create in the run directory (name -> content).
    pub files: BTreeMap<String, String>,
}

impl Default for FakeBehavior {
    fn default() -> Self {
        Self {
            sleep_s: 0.05,
            exit_code: 0,
            stdout: "KPI attached_ues={ueNum}\n".into(),
            stderr: String::new(),
            flowmon_xml: Some(HEALTHY_FLOWMON_XML.into()),
            files: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FakeSimulator {
    pub default: FakeBehavior,
    /// Overrides selected by the `--caseId=<id>` run argument.
    pub by_case: BTreeMap<String, FakeBehavior>,
}

impl FakeSimulator {
    pub fn with_sleep(sleep_s: f64) -> Self {
        Self { default: FakeBehavior { sleep_s, ..Default::default() }, by_case: BTreeMap::new() }
    }

    pub fn behavior_for(&self, args: &[String]) -> &FakeBehavior {
        let params = arg_map(args);
        params
            .get("caseId")
            .and_then(|id| self.by_case.get(id))
            .unwrap_or(&self.default)
    }
}

pub(crate) fn arg_map(args: &[String]) -> BTreeMap<String, String> {
    args.iter()
        .filter_map(|a| a.strip_prefix("--"))
        .filter_map(|a| a.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn render(template: &str, params: &BTreeMap<String, String>) -> String {
    let mut out = template.to_string();
    for (k, v) in params {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

/// Writes the run script for `args` into `dir` and returns the command line.
pub(crate) fn write_run_script(
    sim: &FakeSimulator,
    dir: &Path,
    args: &[String],
) -> Result<Vec<String>, ToolError> {
    let b = sim.behavior_for(args);
    let params = arg_map(args);
    std::fs::create_dir_all(dir)?;
    let stdout_path = dir.join("stdout.txt");
    let stderr_path = dir.join("stderr.txt");
    std::fs::write(&stdout_path, render(&b.stdout, &params))?;
    std::fs::write(&stderr_path, render(&b.stderr, &params))?;
    let mut script = String::from("#!/bin/sh\n");
    if b.sleep_s > 0.0 {
        script.push_str(&format!("sleep {:.3}\n", b.sleep_s));
    }
    script.push_str(&format!("cat {}\ncat {} >&2\n", quote(&stdout_path), quote(&stderr_path)));
    let mut files: Vec<(String, String)> = b.files.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if let Some(xml) = &b.flowmon_xml {
        files.push(("flowmon.xml".into(), render(xml, &params)));
    }
    for (i, (name, content)) in files.iter().enumerate() {
        if name.contains('/') || name.starts_with('.') {
            return Err(ToolError::InvalidInvocation(format!("fake artifact name {name:?} must be a plain file name")));
        }
        let src = dir.join(format!("artifact-{i}"));
        std::fs::write(&src, content)?;
        script.push_str(&format!("cp {} ./{}\n", quote(&src), name));
    }
    script.push_str(&format!("exit {}\n", b.exit_code));
    let path = dir.join("fake_ns3.sh");
    std::fs::write(&path, script)?;
    let mut argv = vec!["sh".to_string(), path.display().to_string()];
    argv.extend(args.iter().cloned());
    Ok(argv)
}

/// Lightweight C++ check used in place of a real compiler: honours `#error`
/// directives and reports unbalanced braces or parentheses, with
/// gcc-style diagnostics. Comments and string literals are skipped.
pub fn fake_compile_diagnostics(file_name: &str, source: &str) -> Option<String> {
    let mut diags = Vec::new();
    let (mut braces, mut parens) = (0i64, 0i64);
    let mut in_block_comment = false;
    let mut last_line = 0;
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let trimmed = line.trim_start();
        if !in_block_comment {
            if let Some(rest) = trimmed.strip_prefix('#') {
                if let Some(msg) = rest.trim_start().strip_prefix("error") {
                    let col = line.len() - trimmed.len() + 2;
                    diags.push(format!("{file_name}:{lineno}:{col}: error: #error {}", msg.trim()));
                }
                continue;
            }
        }
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        let mut in_str: Option<char> = None;
        while i < chars.len() {
            let c = chars[i];
            let next = chars.get(i + 1).copied();
            if in_block_comment {
                if c == '*' && next == Some('/') {
                    in_block_comment = false;
                    i += 1;
                }
            } else if let Some(q) = in_str {
                if c == '\\' {
                    i += 1;
                } else if c == q {
                    in_str = None;
                }
            } else {
                match (c, next) {
                    ('/', Some('/')) => break,
                    ('/', Some('*')) => {
                        in_block_comment = true;
                        i += 1;
                    }
                    ('"', _) | ('\'', _) => in_str = Some(c),
                    ('{', _) => braces += 1,
                    ('}', _) => braces -= 1,
                    ('(', _) => parens += 1,
                    (')', _) => parens -= 1,
                    _ => {}
                }
            }
            i += 1;
        }
    }
    if braces > 0 {
        diags.push(format!("{file_name}:{last_line}:1: error: expected '}}' at end of input"));
    } else if braces < 0 {
        diags.push(format!("{file_name}:{last_line}:1: error: expected declaration before '}}' token"));
    }
    if parens != 0 {
        diags.push(format!("{file_name}:{last_line}:1: error: expected ')' before end of input"));
    }
    (!diags.is_empty()).then(|| diags.join("\n") + "\n")
}

/// Writes the fake compile script for `entry` into `dir`.
pub(crate) fn write_compile_script(dir: &Path, entry: &Path, source: &str) -> Result<Vec<String>, ToolError> {
    let name = entry.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let script_path: PathBuf = dir.join("fake_cxx.sh");
    let script = match fake_compile_diagnostics(&name, source) {
        Some(diag) => {
            let diag_path = dir.join("fake_cxx.diag");
            std::fs::write(&diag_path, diag)?;
            format!("#!/bin/sh\ncat {} >&2\nexit 1\n", quote(&diag_path))
        }
        None => "#!/bin/sh\nexit 0\n".to_string(),
    };
    std::fs::write(&script_path, script)?;
    Ok(vec!["sh".into(), script_path.display().to_string()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_source_compiles() {
        let src = "int main() {\n  // a stray } in a comment\n  const char* s = \"{(\";\n  return 0;\n}\n";
        assert_eq!(fake_compile_diagnostics("sim.cc", src), None);
    }

    #[test]
    fn missing_brace_and_error_directive() {
        let d = fake_compile_diagnostics("sim.cc", "int main() {\n  return 0;\n").unwrap();
        assert!(d.contains("sim.cc:2:1: error: expected '}' at end of input"));
        let d = fake_compile_diagnostics("sim.cc", "#error 'NrHelper' was not declared in this scope\n").unwrap();
        assert!(d.starts_with("sim.cc:1:2: error: #error 'NrHelper'"));
    }

    #[test]
    fn behavior_selected_by_case_argument() {
        let mut sim = FakeSimulator::default();
        sim.by_case.insert("edge".into(), FakeBehavior { exit_code: 139, ..Default::default() });
        assert_eq!(sim.behavior_for(&["--caseId=edge".into()]).exit_code, 139);
        assert_eq!(sim.behavior_for(&["--caseId=other".into()]).exit_code, 0);
        assert_eq!(render("ues={ueNum}", &arg_map(&["--ueNum=150".into()])), "ues=150");
    }
}
