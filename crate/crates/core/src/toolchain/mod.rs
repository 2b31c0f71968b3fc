//! Sandboxed execution backend: stages a simulation payload into a fresh
//! directory, compiles it, runs it directly ("native") or through a Python
//! subprocess wrapper ("wrapped"), and collects artifacts.

mod bench;
mod fake;
mod process;

pub use bench::{benchmark_invocation, MethodStats, OverheadReport, Stat};
pub use fake::{fake_compile_diagnostics, FakeBehavior, FakeSimulator, HEALTHY_FLOWMON_XML, SAMPLE_FLOWMON_XML};

use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::results::TIMEOUT_MARKER;

const BASE_TIME_MARKER: &str = "__NSAGENT_BASE_SECONDS__=";

const WRAPPER_PY: &str = r#"import subprocess, sys, time
start = time.perf_counter()
try:
    proc = subprocess.run(sys.argv[1:])
except OSError as exc:
    sys.stderr.write("wrapper: cannot start simulation: %s\n" % exc)
    sys.exit(127)
elapsed = time.perf_counter() - start
sys.stderr.write("\n__NSAGENT_BASE_SECONDS__=%.9f\n" % elapsed)
rc = proc.returncode
sys.exit(128 - rc if rc < 0 else rc)
"#;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("compilation failed with status {exit_status}")]
    CompileFailed { exit_status: i32, stdout: String, stderr: String },
    #[error("{stage} exceeded its wall timeout of {after:.3} s")]
    Timeout { stage: String, after: f64 },
    #[error("required command `{command}` is not available")]
    EnvMissing { command: String },
    #[error("invalid invocation: {0}")]
    InvalidInvocation(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ToolError {
    fn from(e: std::io::Error) -> Self {
        ToolError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    #[default]
    Cpp,
    Python,
}

impl PayloadKind {
    pub fn file_name(self) -> &'static str {
        match self {
            PayloadKind::Cpp => "sim.cc",
            PayloadKind::Python => "sim.py",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::Cpp => "cpp",
            PayloadKind::Python => "python",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvocationMethod {
    Native,
    Wrapped,
}

/// The source to stage and execute.
#[derive(Debug, Clone, Copy)]
pub struct Payload<'a> {
    pub kind: PayloadKind,
    pub source: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    /// Seconds.
    pub run_timeout: f64,
    /// Seconds.
    pub compile_timeout: f64,
    /// Bytes kept per stream.
    pub output_cap: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { run_timeout: 300.0, compile_timeout: 120.0, output_cap: 4 * 1024 * 1024 }
    }
}

/// Command templates. Placeholders: `{entry}` staged source, `{build}` build
/// directory, `{workdir}` run directory, `{python}` interpreter. An element
/// that is exactly `{args}` expands to the run arguments; `{args_joined}`
/// inside an element is replaced by the space-joined arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadCommands {
    pub compile: Option<Vec<String>>,
    pub run: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolchainConfig {
    pub work_root: PathBuf,
    pub cpp: PayloadCommands,
    pub python: PayloadCommands,
    pub python_interpreter: String,
    pub artifact_globs: Vec<String>,
    pub limits: Limits,
    pub env_whitelist: Vec<String>,
    pub max_parallel: usize,
    pub keep_workdirs: bool,
    /// Replaces the compile/run steps of C++ payloads and the run step of
    /// Python payloads with the fake simulator.
    pub fake: Option<FakeSimulator>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for ToolchainConfig {
    fn default() -> Self {
        Self {
            work_root: std::env::temp_dir().join("nsagent-runs"),
            cpp: PayloadCommands {
                compile: Some(strings(&["c++", "-std=c++20", "-O1", "-o", "{build}/sim", "{entry}"])),
                run: strings(&["{build}/sim", "{args}"]),
            },
            python: PayloadCommands {
                compile: Some(strings(&["{python}", "-m", "py_compile", "{entry}"])),
                run: strings(&["{python}", "{entry}", "{args}"]),
            },
            python_interpreter: "python3".into(),
            artifact_globs: strings(&["*.xml", "*.pcap", "*.log"]),
            limits: Limits::default(),
            env_whitelist: strings(&[
                "PATH",
                "HOME",
                "LANG",
                "LC_ALL",
                "LD_LIBRARY_PATH",
                "PYTHONPATH",
                "NS3_DIR",
                "TMPDIR",
            ]),
            max_parallel: 2,
            keep_workdirs: false,
            fake: None,
        }
    }
}

impl ToolchainConfig {
    pub fn fake(sim: FakeSimulator) -> Self {
        Self { fake: Some(sim), ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub method: InvocationMethod,
    pub args: Vec<String>,
    /// Falls back to the toolchain limits when absent.
    pub limits: Option<Limits>,
}

impl ToolInvocation {
    pub fn native(args: Vec<String>) -> Self {
        Self { method: InvocationMethod::Native, args, limits: None }
    }

    pub fn wrapped(args: Vec<String>) -> Self {
        Self { method: InvocationMethod::Wrapped, args, limits: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// Valid only while the run directory is kept.
    pub path: PathBuf,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub setup: f64,
    pub base: f64,
    pub overhead: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub method: InvocationMethod,
    pub exit_status: i32,
    pub stdout: String,
    pub stderr: String,
    pub truncated: bool,
    pub timed_out: bool,
    pub workdir: PathBuf,
    pub artifacts: Vec<Artifact>,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileOutcome {
    pub exit_status: i32,
    pub stdout: String,
    pub stderr: String,
    pub seconds: f64,
}

/// A staged (and compiled) payload. The build directory is removed on drop
/// unless the toolchain keeps workdirs.
#[derive(Debug)]
pub struct PreparedPayload {
    pub kind: PayloadKind,
    pub build_dir: PathBuf,
    pub entry: PathBuf,
    pub compile: Option<CompileOutcome>,
    /// Staging plus compile seconds.
    pub setup_seconds: f64,
    keep: bool,
}

impl Drop for PreparedPayload {
    fn drop(&mut self) {
        if !self.keep {
            let _ = std::fs::remove_dir_all(&self.build_dir);
        }
    }
}

/// Counting semaphore bounding concurrent subprocesses.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct Toolchain {
    cfg: ToolchainConfig,
    slots: Slots,
}

impl Toolchain {
    pub fn new(cfg: ToolchainConfig) -> Self {
        let slots = Slots::new(cfg.max_parallel);
        Self { cfg, slots }
    }

    pub fn config(&self) -> &ToolchainConfig {
        &self.cfg
    }

    pub fn is_fake(&self) -> bool {
        self.cfg.fake.is_some()
    }

    fn env(&self) -> Vec<(String, String)> {
        self.cfg
            .env_whitelist
            .iter()
            .filter_map(|k| std::env::var(k).ok().map(|v| (k.clone(), v)))
            .collect()
    }

    fn fresh_dir(&self, prefix: &str) -> Result<PathBuf, ToolError> {
        std::fs::create_dir_all(&self.cfg.work_root)?;
        let dir = self.cfg.work_root.join(format!("{prefix}-{}", uuid::Uuid::new_v4().simple()));
        // create_dir (not _all) fails if the directory already exists.
        std::fs::create_dir(&dir)?;
        Ok(dir)
    }

    fn commands(&self, kind: PayloadKind) -> &PayloadCommands {
        match kind {
            PayloadKind::Cpp => &self.cfg.cpp,
            PayloadKind::Python => &self.cfg.python,
        }
    }

    fn expand(&self, template: &[String], entry: &Path, build: &Path, workdir: &Path, args: &[String]) -> Vec<String> {
        let joined = args.join(" ");
        let mut out = Vec::new();
        for t in template {
            if t == "{args}" {
                out.extend(args.iter().cloned());
                continue;
            }
            out.push(
                t.replace("{entry}", &entry.display().to_string())
                    .replace("{build}", &build.display().to_string())
                    .replace("{workdir}", &workdir.display().to_string())
                    .replace("{python}", &self.cfg.python_interpreter)
                    .replace("{args_joined}", &joined),
            );
        }
        out
    }

    /// Stages the payload into a fresh build directory and compiles it.
    pub fn prepare(&self, payload: Payload<'_>) -> Result<PreparedPayload, ToolError> {
        if payload.source.trim().is_empty() {
            return Err(ToolError::InvalidInvocation("payload source is empty".into()));
        }
        let started = Instant::now();
        let build_dir = self.fresh_dir("build")?;
        let entry = build_dir.join(payload.kind.file_name());
        std::fs::write(&entry, payload.source)?;
        let mut prepared = PreparedPayload {
            kind: payload.kind,
            build_dir: build_dir.clone(),
            entry: entry.clone(),
            compile: None,
            setup_seconds: 0.0,
            keep: self.cfg.keep_workdirs,
        };
        let compile_argv = match (payload.kind, &self.cfg.fake) {
            (PayloadKind::Cpp, Some(_)) => Some(fake::write_compile_script(&build_dir, &entry, payload.source)?),
            _ => self
                .commands(payload.kind)
                .compile
                .as_ref()
                .map(|t| self.expand(t, &entry, &build_dir, &build_dir, &[])),
        };
        if let Some(argv) = compile_argv {
            let raw = {
                let _slot = self.slots.acquire();
                process::run_command(
                    &argv,
                    &build_dir,
                    &self.env(),
                    Duration::from_secs_f64(self.cfg.limits.compile_timeout),
                    self.cfg.limits.output_cap,
                )?
            };
            if raw.timed_out {
                return Err(ToolError::Timeout { stage: "compile".into(), after: self.cfg.limits.compile_timeout });
            }
            if raw.exit_status != 0 {
                return Err(ToolError::CompileFailed {
                    exit_status: raw.exit_status,
                    stdout: raw.stdout,
                    stderr: raw.stderr,
                });
            }
            prepared.compile = Some(CompileOutcome {
                exit_status: raw.exit_status,
                stdout: raw.stdout,
                stderr: raw.stderr,
                seconds: raw.elapsed,
            });
        }
        prepared.setup_seconds = started.elapsed().as_secs_f64();
        Ok(prepared)
    }

    /// Runs a prepared payload once in a fresh, empty run directory. A wall
    /// timeout is reported through `timed_out`, not as an error.
    pub fn run_prepared(&self, prepared: &PreparedPayload, inv: &ToolInvocation) -> Result<ExecutionOutcome, ToolError> {
        let started = Instant::now();
        let limits = inv.limits.unwrap_or(self.cfg.limits);
        if limits.run_timeout.is_nan() || limits.run_timeout <= 0.0 {
            return Err(ToolError::InvalidInvocation("run timeout must be positive".into()));
        }
        let workdir = self.fresh_dir("run")?;
        let mut argv = match &self.cfg.fake {
            Some(sim) => fake::write_run_script(sim, &prepared.build_dir.join(format!("fake-{}", uuid::Uuid::new_v4().simple())), &inv.args)?,
            None => self.expand(&self.commands(prepared.kind).run, &prepared.entry, &prepared.build_dir, &workdir, &inv.args),
        };
        if inv.method == InvocationMethod::Wrapped {
            let wrapper = prepared.build_dir.join("nsagent_wrapper.py");
            if !wrapper.exists() {
                std::fs::write(&wrapper, WRAPPER_PY)?;
            }
            let mut wrapped = vec![self.cfg.python_interpreter.clone(), wrapper.display().to_string()];
            wrapped.append(&mut argv);
            argv = wrapped;
        }
        let setup = started.elapsed().as_secs_f64();
        let raw = {
            let _slot = self.slots.acquire();
            process::run_command(
                &argv,
                &workdir,
                &self.env(),
                Duration::from_secs_f64(limits.run_timeout),
                limits.output_cap,
            )?
        };
        let mut stderr = raw.stderr;
        let mut base = raw.elapsed;
        if inv.method == InvocationMethod::Wrapped {
            if let Some(pos) = stderr.rfind(BASE_TIME_MARKER) {
                let value = stderr[pos + BASE_TIME_MARKER.len()..].lines().next().unwrap_or("");
                if let Ok(v) = value.trim().parse::<f64>() {
                    base = v.min(raw.elapsed);
                }
                let cut = stderr[..pos].strip_suffix('\n').map_or(pos, |s| s.len());
                stderr.truncate(cut);
            }
        }
        if raw.timed_out {
            if !stderr.is_empty() && !stderr.ends_with('\n') {
                stderr.push('\n');
            }
            stderr.push_str(&format!("{TIMEOUT_MARKER} of {:.3} s\n", limits.run_timeout));
        }
        let artifacts = if raw.timed_out { Vec::new() } else { self.collect_artifacts(&workdir)? };
        if !self.cfg.keep_workdirs {
            let _ = std::fs::remove_dir_all(&workdir);
        }
        let total = started.elapsed().as_secs_f64();
        let overhead = (total - setup - base).max(0.0);
        Ok(ExecutionOutcome {
            method: inv.method,
            exit_status: raw.exit_status,
            stdout: raw.stdout,
            stderr,
            truncated: raw.truncated,
            timed_out: raw.timed_out,
            workdir,
            artifacts,
            timings: Timings { setup, base, overhead, total: setup + base + overhead },
        })
    }

    fn collect_artifacts(&self, workdir: &Path) -> Result<Vec<Artifact>, ToolError> {
        let patterns: Vec<glob::Pattern> = self
            .cfg
            .artifact_globs
            .iter()
            .filter_map(|g| glob::Pattern::new(g).ok())
            .collect();
        let mut names: Vec<String> = std::fs::read_dir(workdir)?
            .filter_map(Result::ok)
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| patterns.iter().any(|p| p.matches(n)))
            .collect();
        names.sort();
        names
            .into_iter()
            .map(|name| {
                let path = workdir.join(&name);
                let bytes = std::fs::read(&path)?;
                Ok(Artifact { name, path, bytes })
            })
            .collect()
    }

    fn run_once(&self, payload: Payload<'_>, inv: &ToolInvocation) -> Result<ExecutionOutcome, ToolError> {
        let prepared = self.prepare(payload)?;
        let mut outcome = self.run_prepared(&prepared, inv)?;
        if outcome.timed_out {
            let after = inv.limits.unwrap_or(self.cfg.limits).run_timeout;
            return Err(ToolError::Timeout { stage: "run".into(), after });
        }
        outcome.timings.setup += prepared.setup_seconds;
        outcome.timings.total += prepared.setup_seconds;
        Ok(outcome)
    }

    /// Compiles and runs the payload by invoking the simulation directly.
    pub fn run_native(&self, payload: Payload<'_>, args: Vec<String>) -> Result<ExecutionOutcome, ToolError> {
        self.run_once(payload, &ToolInvocation::native(args))
    }

    /// Same as [`Toolchain::run_native`] but through the Python subprocess wrapper.
    pub fn run_wrapped(&self, payload: Payload<'_>, args: Vec<String>) -> Result<ExecutionOutcome, ToolError> {
        self.run_once(payload, &ToolInvocation::wrapped(args))
    }

    pub fn run(&self, payload: Payload<'_>, inv: &ToolInvocation) -> Result<ExecutionOutcome, ToolError> {
        self.run_once(payload, inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD_CPP: &str = "int main() {\n  return 0;\n}\n";

    fn toolchain(sim: FakeSimulator) -> (Toolchain, tempfile::TempDir) {
        let root = tempfile::tempdir().unwrap();
        let cfg = ToolchainConfig { work_root: root.path().to_path_buf(), ..ToolchainConfig::fake(sim) };
        (Toolchain::new(cfg), root)
    }

    fn cpp(src: &str) -> Payload<'_> {
        Payload { kind: PayloadKind::Cpp, source: src }
    }

    #[test]
    fn fake_run_collects_flowmonitor_and_times_the_sleep() {
        let (tc, _root) = toolchain(FakeSimulator::with_sleep(0.5));
        let out = tc.run_native(cpp(GOOD_CPP), vec!["--ueNum=100".into()]).unwrap();
        assert_eq!(out.exit_status, 0);
        assert_eq!(out.artifacts.iter().map(|a| a.name.as_str()).collect::<Vec<_>>(), vec!["flowmon.xml"]);
        assert!((out.timings.base - 0.5).abs() < 0.2, "base {}", out.timings.base);
        assert_eq!(out.stdout, "KPI attached_ues=100\n");
        let t = out.timings;
        assert!((t.total - (t.setup + t.base + t.overhead)).abs() < 0.01);
    }

    #[test]
    fn syntax_error_fails_compile() {
        let (tc, _root) = toolchain(FakeSimulator::default());
        match tc.run_native(cpp("int main() {\n"), vec![]) {
            Err(ToolError::CompileFailed { stderr, exit_status, .. }) => {
                assert_eq!(exit_status, 1);
                assert!(stderr.contains("error: expected '}'"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn timeout_yields_no_artifacts() {
        let (tc, _root) = toolchain(FakeSimulator::with_sleep(0.5));
        let inv = ToolInvocation {
            limits: Some(Limits { run_timeout: 0.1, ..Limits::default() }),
            ..ToolInvocation::native(vec![])
        };
        assert!(matches!(tc.run(cpp(GOOD_CPP), &inv), Err(ToolError::Timeout { .. })));

        let prepared = tc.prepare(cpp(GOOD_CPP)).unwrap();
        let out = tc.run_prepared(&prepared, &inv).unwrap();
        assert!(out.timed_out);
        assert!(out.artifacts.is_empty());
        assert!(out.stderr.contains(TIMEOUT_MARKER));
    }

    #[test]
    fn wrapper_propagates_exit_status_and_artifacts() {
        let mut sim = FakeSimulator::with_sleep(0.05);
        sim.default.exit_code = 3;
        sim.default.stderr = "boom\n".into();
        let (tc, _root) = toolchain(sim);
        let out = tc.run_wrapped(cpp(GOOD_CPP), vec![]).unwrap();
        assert_eq!(out.exit_status, 3);
        assert_eq!(out.stderr, "boom\n");
        assert_eq!(out.artifacts.len(), 1);
        assert!(out.timings.base >= 0.04);
    }

    #[test]
    fn missing_wrapper_interpreter() {
        let root = tempfile::tempdir().unwrap();
        let cfg = ToolchainConfig {
            work_root: root.path().to_path_buf(),
            python_interpreter: "/nonexistent/python3".into(),
            ..ToolchainConfig::fake(FakeSimulator::default())
        };
        let tc = Toolchain::new(cfg);
        assert!(matches!(tc.run_wrapped(cpp(GOOD_CPP), vec![]), Err(ToolError::EnvMissing { .. })));
    }

    #[test]
    fn concurrent_runs_use_distinct_workdirs() {
        let (tc, _root) = toolchain(FakeSimulator::with_sleep(0.05));
        let outs: Vec<_> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..4).map(|_| s.spawn(|| tc.run_native(cpp(GOOD_CPP), vec![]).unwrap())).collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut dirs: Vec<_> = outs.iter().map(|o| o.workdir.clone()).collect();
        dirs.sort();
        dirs.dedup();
        assert_eq!(dirs.len(), 4);
    }

    #[test]
    fn python_payload_parse_check() {
        let (tc, _root) = toolchain(FakeSimulator::default());
        let bad = Payload { kind: PayloadKind::Python, source: "def f(:\n  pass\n" };
        match tc.run_native(bad, vec![]) {
            Err(ToolError::CompileFailed { stderr, .. }) => assert!(stderr.contains("SyntaxError")),
            other => panic!("unexpected {other:?}"),
        }
        let good = Payload { kind: PayloadKind::Python, source: "print('hi')\n" };
        assert_eq!(tc.run_native(good, vec![]).unwrap().exit_status, 0);
    }
}
