use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentSettings, SimulationSpec};
use crate::exec::Execution;
use crate::orchestrator::{run_pipeline, PipelineConfig, PipelineDeps, SessionState, SessionStatus};

use super::{EvalError, EvalRun, SampleOutcome};

/// A benchmark scenario, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub requirements: String,
    /// Spec fields the extraction must reproduce, as `key = "value with unit"`.
    #[serde(default)]
    pub expected: BTreeMap<String, String>,
    #[serde(default = "default_count")]
    pub n: u64,
    #[serde(default = "default_count")]
    pub k: u64,
    #[serde(default = "default_iterations")]
    pub max_iterations: u32,
    /// Scripted transcript, relative to the scenario file.
    #[serde(default)]
    pub transcript: Option<PathBuf>,
    #[serde(default)]
    pub human_eval_score: Option<f64>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_count() -> u64 {
    5
}

fn default_iterations() -> u32 {
    5
}

impl Scenario {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, EvalError> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| EvalError::Scenario(e.to_string()))?;
        s.base_dir = base_dir.to_path_buf();
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.id.trim().is_empty() || self.requirements.trim().is_empty() {
            return Err(EvalError::Scenario("id and requirements must be non-empty".into()));
        }
        if self.max_iterations == 0 {
            return Err(EvalError::Scenario("max_iterations must be at least 1".into()));
        }
        SimulationSpec::case_study()
            .with_overrides(&self.expected)
            .map_err(|e| EvalError::Scenario(format!("expected fields: {e}")))?;
        Ok(())
    }

    pub fn transcript_path(&self) -> Option<PathBuf> {
        self.transcript.as_ref().map(|t| self.base_dir.join(t))
    }

    /// True when `spec` already holds every expected value.
    pub fn spec_matches(&self, spec: &SimulationSpec) -> bool {
        spec.with_overrides(&self.expected).is_ok_and(|s| &s == spec)
    }
}

pub type DepsFactory<'a> = dyn Fn(usize) -> Result<PipelineDeps, String> + Sync + Send + 'a;

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub n: u64,
    pub k: u64,
    pub agent: AgentSettings,
    pub execution: Execution,
    /// Each finished sample is appended here as a JSON line.
    pub record_path: Option<PathBuf>,
}

impl BenchmarkOptions {
    pub fn for_scenario(s: &Scenario) -> Self {
        Self { n: s.n, k: s.k, agent: AgentSettings::default(), execution: Execution::default(), record_path: None }
    }
}

fn outcome(sample: usize, scenario: &Scenario, state: &SessionState) -> SampleOutcome {
    let converged = state.status == SessionStatus::Converged;
    let spec_ok = state.spec.as_ref().is_some_and(|s| scenario.spec_matches(s));
    SampleOutcome {
        sample,
        session_id: state.session_id.clone(),
        status: state.status.as_str().to_string(),
        iterations_to_converge: converged.then_some(state.iterations.len() as u32),
        iterations_run: state.iterations.len() as u32,
        first_compile_ok: state.iterations.first().is_some_and(|i| i.first_compile_ok()),
        response_time_s: state.llm_seconds_total + state.tool_seconds_total,
        passed: converged && spec_ok,
        failure_reason: state.failure_reason.clone(),
    }
}

/// Runs the pipeline `n` independent times. Samples may run concurrently;
/// the toolchain's own limit bounds simulator processes. Finished samples are
/// recorded even when a later one aborts the run.
pub fn run_benchmark(scenario: &Scenario, opts: &BenchmarkOptions, deps: &DepsFactory<'_>) -> Result<EvalRun, EvalError> {
    if opts.n == 0 {
        return Err(EvalError::Domain("n must be at least 1".into()));
    }
    if opts.k == 0 || opts.k > opts.n {
        return Err(EvalError::Domain(format!("k = {} must lie in 1..={}", opts.k, opts.n)));
    }
    let record = match &opts.record_path {
        Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    let config = PipelineConfig {
        max_iterations: scenario.max_iterations,
        pause_for_human: false,
        agent: opts.agent.clone(),
        execution: opts.execution,
    };
    let samples = opts.execution.map_range(opts.n as usize, |i| -> Result<SampleOutcome, EvalError> {
        let d = deps(i).map_err(EvalError::Runner)?;
        let state = run_pipeline(&scenario.requirements, config.clone(), d)?;
        let o = outcome(i, scenario, &state);
        if let Some(f) = &record {
            let line = serde_json::to_string(&o).expect("outcomes serialize");
            writeln!(f.lock().unwrap(), "{line}")?;
        }
        Ok(o)
    });
    let per_sample = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut run = EvalRun::from_samples(scenario.id.clone(), opts.k, per_sample);
    run.human_eval_score = scenario.human_eval_score;
    run.validate()?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_harness::compute_table_metrics;
    use crate::llm_gateway::ScriptedProvider;
    use crate::toolchain::{FakeSimulator, Toolchain, ToolchainConfig};
    use std::sync::Arc;

    const SPEC_REPLY: &str = "```spec\ncarrier_frequency: 3.5 GHz\nbandwidth: 20 MHz\nnum_ues: 4\nnum_gnbs: 1\ntransport_protocol: UDP\n```";
    const INTERP_OK: &str = "```interpretation\nsummary: fine\nverdict: meets_criteria\n```";

    fn script() -> String {
        let body = "#include \"ns3/nr-module.h\"\nint main() {\n  NodeContainer ues; ues.Create(4);\n  NetDeviceContainer d = nrHelper->InstallUeDevice(ues, bwps);\n  UdpClientHelper client(addr, 9); client.Install(ues);\n  return 0;\n}\n";
        format!("```cpp\n{body}```")
    }

    fn scenario(dir: &Path) -> Scenario {
        Scenario::from_toml(
            "id = \"mini\"\nrequirements = \"four UEs on one gNB\"\nn = 3\nk = 2\n[expected]\nnum_ues = \"4\"\ntransport_protocol = \"UDP\"\n",
            dir,
        )
        .unwrap()
    }

    fn factory(work: PathBuf) -> impl Fn(usize) -> Result<PipelineDeps, String> + Sync + Send {
        move |_| {
            let p = ScriptedProvider::from_replies([SPEC_REPLY.to_string(), script(), "[]".into(), INTERP_OK.into()])
                .map_err(|e| e.to_string())?;
            let mut cfg = ToolchainConfig::fake(FakeSimulator::with_sleep(0.0));
            cfg.work_root = work.clone();
            Ok(PipelineDeps::offline(Arc::new(p), Toolchain::new(cfg)))
        }
    }

    #[test]
    fn parses_and_rejects_scenarios() {
        let dir = tempfile::tempdir().unwrap();
        let s = scenario(dir.path());
        assert_eq!((s.n, s.k, s.max_iterations), (3, 2, 5));
        assert!(Scenario::from_toml("id = \"x\"\nrequirements = \"r\"\n[expected]\nnum_ues = \"lots\"\n", dir.path()).is_err());
        assert!(Scenario::from_toml("requirements = 3", dir.path()).is_err());
    }

    #[test]
    fn deterministic_replay_benchmark() {
        let dir = tempfile::tempdir().unwrap();
        let s = scenario(dir.path());
        let record = dir.path().join("samples.jsonl");
        let opts = BenchmarkOptions { record_path: Some(record.clone()), ..BenchmarkOptions::for_scenario(&s) };
        let f = factory(dir.path().to_path_buf());
        let run = run_benchmark(&s, &opts, &f).unwrap();
        assert_eq!((run.n, run.c, run.k), (3, 3, 2));
        assert!(run.per_sample.iter().all(|o| o.iterations_to_converge == Some(1) && o.first_compile_ok));
        assert_eq!(std::fs::read_to_string(&record).unwrap().lines().count(), 3);

        let again = run_benchmark(&s, &BenchmarkOptions::for_scenario(&s), &f).unwrap();
        let strip = |r: &EvalRun| {
            let mut m = compute_table_metrics(std::slice::from_ref(r)).unwrap();
            m.avg_response_time = 0.0;
            m.response_time_std = 0.0;
            m
        };
        assert_eq!(strip(&run), strip(&again));
    }

    #[test]
    fn wrong_spec_does_not_pass() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = scenario(dir.path());
        s.expected.insert("num_ues".into(), "8".into());
        let run = run_benchmark(&s, &BenchmarkOptions::for_scenario(&s), &factory(dir.path().to_path_buf())).unwrap();
        assert_eq!(run.c, 0);
    }

    #[test]
    fn preconditions() {
        let dir = tempfile::tempdir().unwrap();
        let s = scenario(dir.path());
        let f = factory(dir.path().to_path_buf());
        let zero = BenchmarkOptions { n: 0, ..BenchmarkOptions::for_scenario(&s) };
        assert!(matches!(run_benchmark(&s, &zero, &f), Err(EvalError::Domain(_))));
        let big_k = BenchmarkOptions { k: 9, ..BenchmarkOptions::for_scenario(&s) };
        assert!(matches!(run_benchmark(&s, &big_k, &f), Err(EvalError::Domain(_))));
    }
}
