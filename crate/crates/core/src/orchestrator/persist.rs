//! On-disk session layout, one directory per session:
//!
//! ```text
//! <root>/<session_id>/record.jsonl   state snapshot per line, append-only
//! <root>/<session_id>/events.jsonl   one AgentEvent per line, append-only
//! <root>/<session_id>/scripts/iter-<n>.<cc|py>
//! <root>/<session_id>/outputs/iter-<n>/{compile.stderr,<case>.stdout,<case>.stderr}
//! ```
//!
//! The last complete line of `record.jsonl` is the current state; a torn
//! final line from a crash is ignored.

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{ExecutionReport, GeneratedScript};
use crate::toolchain::PayloadKind;

use super::{now_ms, AgentEvent, IterationRecord, SessionState};

pub const RECORD_VERSION: u32 = 1;

#[derive(Serialize)]
struct RecordLineRef<'a> {
    record_version: u32,
    written_ms: u64,
    state: &'a SessionState,
    in_progress: Option<&'a IterationRecord>,
}

#[derive(Deserialize)]
struct RecordLine {
    record_version: u32,
    state: SessionState,
}

#[derive(Debug, Clone)]
pub struct SessionDir {
    path: PathBuf,
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn append_line(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut line = serde_json::to_vec(value).map_err(io::Error::other)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    f.flush()
}

impl SessionDir {
    pub fn create(root: &Path, session_id: &str) -> io::Result<Self> {
        if session_id.is_empty() || safe_name(session_id) != session_id {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "session id must be a plain name"));
        }
        let path = root.join(session_id);
        std::fs::create_dir_all(path.join("scripts"))?;
        std::fs::create_dir_all(path.join("outputs"))?;
        Ok(Self { path })
    }

    pub fn open(root: &Path, session_id: &str) -> io::Result<Self> {
        let path = root.join(safe_name(session_id));
        if !path.join("record.jsonl").is_file() {
            return Err(io::Error::new(io::ErrorKind::NotFound, format!("no session record in {}", path.display())));
        }
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append_event(&self, event: &AgentEvent) -> io::Result<()> {
        append_line(&self.path.join("events.jsonl"), event)
    }

    pub fn append_snapshot(&self, state: &SessionState, in_progress: Option<&IterationRecord>) -> io::Result<()> {
        let line = RecordLineRef { record_version: RECORD_VERSION, written_ms: now_ms(), state, in_progress };
        append_line(&self.path.join("record.jsonl"), &line)
    }

    pub fn write_script(&self, script: &GeneratedScript) -> io::Result<()> {
        let ext = match script.payload_kind {
            PayloadKind::Cpp => "cc",
            PayloadKind::Python => "py",
        };
        std::fs::write(self.path.join("scripts").join(format!("iter-{}.{ext}", script.iteration)), &script.source_text)
    }

    pub fn write_outputs(&self, report: &ExecutionReport) -> io::Result<()> {
        let dir = self.path.join("outputs").join(format!("iter-{}", report.iteration));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("compile.stderr"), &report.compile.stderr)?;
        for c in &report.cases {
            let name = safe_name(&c.case_id);
            std::fs::write(dir.join(format!("{name}.stdout")), &c.stdout)?;
            std::fs::write(dir.join(format!("{name}.stderr")), &c.stderr)?;
        }
        Ok(())
    }

    /// Latest state and all events.
    pub fn load(&self) -> io::Result<(SessionState, Vec<AgentEvent>)> {
        let text = std::fs::read_to_string(self.path.join("record.jsonl"))?;
        let mut state = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<RecordLine>(line) {
                Ok(r) if r.record_version == RECORD_VERSION => state = Some(r.state),
                Ok(r) => {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("record version {} is not {RECORD_VERSION}", r.record_version),
                    ))
                }
                Err(e) => tracing::warn!(error = %e, "skipping unreadable session record line"),
            }
        }
        let state = state.ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "no readable session record"))?;
        let events = match std::fs::read_to_string(self.path.join("events.jsonl")) {
            Ok(t) => t.lines().filter_map(|l| serde_json::from_str(l).ok()).collect(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        Ok((state, events))
    }
}

/// Ids of the sessions persisted under `root`, sorted.
pub fn list_sessions(root: &Path) -> io::Result<Vec<String>> {
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e),
    };
    for entry in entries {
        let entry = entry?;
        if entry.path().join("record.jsonl").is_file() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{EventKind, PipelineConfig, SessionStatus};

    #[test]
    fn round_trip_and_torn_tail() {
        let root = tempfile::tempdir().unwrap();
        let dir = SessionDir::create(root.path(), "abc").unwrap();
        let mut s = SessionState::new("abc", PipelineConfig::default());
        dir.append_snapshot(&s, None).unwrap();
        s.status = SessionStatus::Failed;
        dir.append_snapshot(&s, None).unwrap();
        let ev = AgentEvent { session_id: "abc".into(), sequence: 1, kind: EventKind::SessionDone, payload: serde_json::json!({}), timestamp_ms: 5 };
        dir.append_event(&ev).unwrap();
        let mut f = OpenOptions::new().append(true).open(dir.path().join("record.jsonl")).unwrap();
        f.write_all(b"{\"record_version\":1,\"sta").unwrap();
        let (loaded, events) = SessionDir::open(root.path(), "abc").unwrap().load().unwrap();
        assert_eq!(loaded.status, SessionStatus::Failed);
        assert_eq!(events, vec![ev]);
        assert_eq!(list_sessions(root.path()).unwrap(), vec!["abc"]);
    }

    #[test]
    fn rejects_path_like_ids() {
        let root = tempfile::tempdir().unwrap();
        assert!(SessionDir::create(root.path(), "../x").is_err());
        assert!(SessionDir::open(root.path(), "missing").is_err());
    }
}
