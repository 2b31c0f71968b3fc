//! Child process execution with a wall timeout, capped output capture and
//! process-group teardown.

use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::ToolError;

#[derive(Debug, Clone)]
pub(crate) struct RawRun {
    pub exit_status: i32,
    pub stdout: String,
    pub stderr: String,
    pub truncated: bool,
    pub timed_out: bool,
    pub elapsed: f64,
}

fn capture<R: Read>(mut reader: R, cap: usize) -> (Vec<u8>, bool) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    let mut truncated = false;
    loop {
        match reader.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => {
                let room = cap.saturating_sub(buf.len());
                if n > room {
                    truncated = true;
                }
                // Keep draining past the cap so the child never blocks on a full pipe.
                buf.extend_from_slice(&chunk[..n.min(room)]);
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        }
    }
    (buf, truncated)
}

fn kill_group(pgid: u32) {
    // SAFETY: plain syscall; an already-empty group yields ESRCH, which is fine.
    unsafe {
        libc::kill(-(pgid as libc::pid_t), libc::SIGKILL);
    }
}

pub(crate) fn run_command(
    argv: &[String],
    cwd: &Path,
    env: &[(String, String)],
    timeout: Duration,
    output_cap: usize,
) -> Result<RawRun, ToolError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| ToolError::InvalidInvocation("empty command".into()))?;
    let started = Instant::now();
    let mut child = Command::new(program)
        .args(args)
        .current_dir(cwd)
        .env_clear()
        .envs(env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                ToolError::EnvMissing { command: program.clone() }
            }
            _ => ToolError::Io(e.to_string()),
        })?;
    let pgid = child.id();
    let out = child.stdout.take().expect("piped stdout");
    let err = child.stderr.take().expect("piped stderr");
    let out_h = thread::spawn(move || capture(out, output_cap));
    let err_h = thread::spawn(move || capture(err, output_cap));

    let deadline = started + timeout;
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if Instant::now() >= deadline => {
                timed_out = true;
                kill_group(pgid);
                break child.wait().map_err(|e| ToolError::Io(e.to_string()))?;
            }
            Ok(None) => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                kill_group(pgid);
                let _ = child.wait();
                return Err(ToolError::Io(e.to_string()));
            }
        }
    };
    let elapsed = started.elapsed().as_secs_f64();
    // Reap anything the payload left behind; this also closes inherited pipes.
    kill_group(pgid);
    let (stdout, t1) = out_h.join().unwrap_or_default();
    let (stderr, t2) = err_h.join().unwrap_or_default();
    let exit_status = status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0));
    Ok(RawRun {
        exit_status,
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
        truncated: t1 || t2,
        timed_out,
        elapsed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    fn env() -> Vec<(String, String)> {
        vec![("PATH".into(), std::env::var("PATH").unwrap_or_default())]
    }

    #[test]
    fn captures_and_reports_status() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_command(&sh("echo out; echo err >&2; exit 7"), dir.path(), &env(), Duration::from_secs(5), 1024)
            .unwrap();
        assert_eq!((r.exit_status, r.stdout.as_str(), r.stderr.as_str()), (7, "out\n", "err\n"));
        assert!(!r.timed_out);
    }

    #[test]
    fn output_is_capped() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_command(&sh("yes x | head -c 100000"), dir.path(), &env(), Duration::from_secs(5), 1000)
            .unwrap();
        assert_eq!(r.stdout.len(), 1000);
        assert!(r.truncated);
    }

    #[test]
    fn timeout_kills_whole_group() {
        let dir = tempfile::tempdir().unwrap();
        let marker = dir.path().join("late");
        let script = format!("(sleep 1; touch {}) & sleep 5", marker.display());
        let started = Instant::now();
        let r = run_command(&sh(&script), dir.path(), &env(), Duration::from_millis(100), 1024).unwrap();
        assert!(r.timed_out);
        assert!(started.elapsed() < Duration::from_secs(2));
        thread::sleep(Duration::from_millis(1200));
        assert!(!marker.exists(), "background child survived the kill");
    }

    #[test]
    fn stragglers_are_reaped_after_normal_exit() {
        let dir = tempfile::tempdir().unwrap();
        let marker = dir.path().join("orphan");
        let script = format!("(sleep 0.5; touch {}) & exit 0", marker.display());
        let r = run_command(&sh(&script), dir.path(), &env(), Duration::from_secs(5), 1024).unwrap();
        assert_eq!(r.exit_status, 0);
        thread::sleep(Duration::from_millis(800));
        assert!(!marker.exists());
    }

    #[test]
    fn missing_program() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_command(&["/no/such/bin".to_string()], dir.path(), &env(), Duration::from_secs(1), 10)
            .unwrap_err();
        assert!(matches!(err, ToolError::EnvMissing { .. }));
    }
}
