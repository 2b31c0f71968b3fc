//! Code-generation metrics, query timing and scenario benchmarks.

mod benchmark;
mod timing;

pub use benchmark::{run_benchmark, BenchmarkOptions, DepsFactory, Scenario};
pub use timing::{time_query_classes, timing_table, ClassTiming, QueryClass, QueryRunner};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::OrchestratorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("runner failed: {0}")]
    Runner(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unbiased pass@k: `1 - C(n-c, k) / C(n, k)`, evaluated as a running
/// product so large `n` never overflows.
pub fn compute_pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EvalError> {
    if c > n {
        return Err(EvalError::Domain(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(EvalError::Domain(format!("k = {k} must lie in 1..={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n-c, k) / C(n, k) = prod_{i = n-c+1}^{n} (1 - k / i)
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// Outcome of one independent pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample: usize,
    pub session_id: String,
    pub status: String,
    /// Iteration count when the session converged.
    pub iterations_to_converge: Option<u32>,
    pub iterations_run: u32,
    pub first_compile_ok: bool,
    /// LLM latency plus tool time.
    pub response_time_s: f64,
    /// Converged with every test passing and the expected spec fields.
    pub passed: bool,
    pub failure_reason: Option<String>,
}

impl SampleOutcome {
    /// Outcome with only the metric-relevant fields set.
    pub fn synthetic(sample: usize, iterations: Option<u32>, first_compile_ok: bool, response_time_s: f64, passed: bool) -> Self {
        Self {
            sample,
            session_id: format!("synthetic-{sample}"),
            status: if iterations.is_some() { "converged" } else { "failed" }.into(),
            iterations_to_converge: iterations,
            iterations_run: iterations.unwrap_or(0),
            first_compile_ok,
            response_time_s,
            passed,
            failure_reason: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub scenario_id: String,
    pub n: u64,
    pub c: u64,
    pub k: u64,
    pub per_sample: Vec<SampleOutcome>,
    /// Operator-entered score on a 1 to 10 scale.
    pub human_eval_score: Option<f64>,
}

impl EvalRun {
    /// Derives `n` and `c` from the samples.
    pub fn from_samples(scenario_id: impl Into<String>, k: u64, per_sample: Vec<SampleOutcome>) -> Self {
        let n = per_sample.len() as u64;
        let c = per_sample.iter().filter(|s| s.passed).count() as u64;
        Self { scenario_id: scenario_id.into(), n, c, k, per_sample, human_eval_score: None }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.c > self.n || self.k == 0 || self.k > self.n {
            return Err(EvalError::Domain(format!(
                "run {}: need c <= n and 1 <= k <= n, got n={} c={} k={}",
                self.scenario_id, self.n, self.c, self.k
            )));
        }
        if let Some(h) = self.human_eval_score {
            if !(1.0..=10.0).contains(&h) {
                return Err(EvalError::Domain(format!("human eval score {h} outside 1..=10")));
            }
        }
        Ok(())
    }

    pub fn pass_at_k(&self) -> Result<f64, EvalError> {
        compute_pass_at_k(self.n, self.c, self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPassAtK {
    pub scenario_id: String,
    pub n: u64,
    pub c: u64,
    pub k: u64,
    pub pass_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub samples: usize,
    /// Mean iterations over converged samples; `None` when none converged.
    pub avg_iterations: Option<f64>,
    /// Fraction of samples whose first compile or parse failed.
    pub syntax_error_rate: f64,
    pub avg_response_time: f64,
    /// Sample standard deviation; zero for a single sample.
    pub response_time_std: f64,
    /// Mean of the per-scenario values below.
    pub pass_at_k: f64,
    pub per_scenario: Vec<ScenarioPassAtK>,
    pub human_eval: Option<f64>,
}

pub const TABLE_HEADER: [&str; 6] = [
    "Simulation Scenario",
    "Avg. Iterations",
    "Syntax Error Rate (%)",
    "Avg. Response Time (s)",
    "Human Eval Score",
    "Pass Rate",
];

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

pub(crate) fn markdown_row(cells: &[String]) -> String {
    format!("| {} |", cells.join(" | "))
}

impl MetricsReport {
    pub fn row(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
        markdown_row(&[
            self.label.clone(),
            opt(self.avg_iterations, 1),
            format!("{:.1}", self.syntax_error_rate * 100.0),
            format!("{:.1}", self.avg_response_time),
            opt(self.human_eval, 1),
            format!("{:.2}", self.pass_at_k),
        ])
    }

    /// Header, separator and the aggregate row, followed by one line per
    /// scenario with its own pass@k.
    pub fn table(&self) -> String {
        let header: Vec<String> = TABLE_HEADER.iter().map(|s| s.to_string()).collect();
        let sep: Vec<String> = TABLE_HEADER.iter().map(|_| "---".to_string()).collect();
        let mut out = format!("{}\n{}\n{}\n", markdown_row(&header), markdown_row(&sep), self.row());
        if self.per_scenario.len() > 1 || self.per_scenario.first().is_some_and(|s| s.scenario_id != self.label) {
            out.push('\n');
            for s in &self.per_scenario {
                out.push_str(&format!(
                    "pass@{} [{}]: {:.2} (n={}, c={})\n",
                    s.k, s.scenario_id, s.pass_at_k, s.n, s.c
                ));
            }
        }
        out
    }
}

/// Aggregates runs into one table row. The label is the shared scenario id,
/// or "All Scenarios" when runs differ.
pub fn compute_table_metrics(runs: &[EvalRun]) -> Result<MetricsReport, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::Domain("no runs to aggregate".into()));
    }
    for r in runs {
        r.validate()?;
    }
    let samples: Vec<&SampleOutcome> = runs.iter().flat_map(|r| &r.per_sample).collect();
    let converged: Vec<f64> = samples.iter().filter_map(|s| s.iterations_to_converge.map(f64::from)).collect();
    let avg_iterations = (!converged.is_empty()).then(|| converged.iter().sum::<f64>() / converged.len() as f64);
    let syntax_error_rate = if samples.is_empty() {
        0.0
    } else {
        samples.iter().filter(|s| !s.first_compile_ok).count() as f64 / samples.len() as f64
    };
    let times: Vec<f64> = samples.iter().map(|s| s.response_time_s).collect();
    let (avg_response_time, response_time_std) = mean_std(&times);
    let per_scenario = runs
        .iter()
        .map(|r| {
            Ok(ScenarioPassAtK { scenario_id: r.scenario_id.clone(), n: r.n, c: r.c, k: r.k, pass_at_k: r.pass_at_k()? })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let pass_at_k = per_scenario.iter().map(|s| s.pass_at_k).sum::<f64>() / per_scenario.len() as f64;
    let scores: Vec<f64> = runs.iter().filter_map(|r| r.human_eval_score).collect();
    let human_eval = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    let first = &runs[0].scenario_id;
    let label = if runs.iter().all(|r| &r.scenario_id == first) { first.clone() } else { "All Scenarios".into() };
    Ok(MetricsReport {
        label,
        samples: samples.len(),
        avg_iterations,
        syntax_error_rate,
        avg_response_time,
        response_time_std,
        pass_at_k,
        per_scenario,
        human_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Fraction of k-subsets of n samples (the first c passing) that contain a
    /// passing sample, as an exact ratio.
    fn brute(n: u32, c: u32, k: u32) -> (u64, u64) {
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() != k {
                continue;
            }
            total += 1;
            if mask & ((1 << c) - 1) != 0 {
                hit += 1;
            }
        }
        (hit, total)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(compute_pass_at_k(5, 5, 1).unwrap(), 1.0);
        assert_eq!(compute_pass_at_k(5, 0, 5).unwrap(), 0.0);
        assert!((compute_pass_at_k(5, 2, 3).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(brute(5, 2, 3), (9, 10));
    }

    #[test]
    fn matches_enumeration_for_small_n() {
        for n in 1..=6u32 {
            for c in 0..=n {
                for k in 1..=n {
                    let (hit, total) = brute(n, c, k);
                    let got = compute_pass_at_k(n as u64, c as u64, k as u64).unwrap();
                    assert!((got - hit as f64 / total as f64).abs() <= 1e-12, "n={n} c={c} k={k}");
                }
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(compute_pass_at_k(5, 6, 1), Err(EvalError::Domain(_))));
        assert!(matches!(compute_pass_at_k(5, 2, 0), Err(EvalError::Domain(_))));
        assert!(matches!(compute_pass_at_k(5, 2, 6), Err(EvalError::Domain(_))));
        assert!(matches!(compute_pass_at_k(0, 0, 1), Err(EvalError::Domain(_))));
    }

    #[test]
    fn large_n_is_finite() {
        let p = compute_pass_at_k(10_000, 37, 100).unwrap();
        assert!(p.is_finite() && (0.0..=1.0).contains(&p));
    }

    proptest! {
        #[test]
        fn monotone_in_k_and_c(n in 1u64..200, c_frac in 0.0f64..=1.0, k_frac in 0.0f64..=1.0) {
            let c = ((n as f64) * c_frac).floor() as u64;
            let k = 1 + (((n - 1) as f64) * k_frac).floor() as u64;
            let p = compute_pass_at_k(n, c, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            if k < n {
                prop_assert!(compute_pass_at_k(n, c, k + 1).unwrap() >= p - 1e-12);
            }
            if c < n {
                prop_assert!(compute_pass_at_k(n, c + 1, k).unwrap() >= p - 1e-12);
            }
        }

        #[test]
        fn syntax_rate_ignores_order(flags in proptest::collection::vec(any::<bool>(), 1..60), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let samples: Vec<_> = flags.iter().enumerate()
                .map(|(i, ok)| SampleOutcome::synthetic(i, Some(1), *ok, 1.0, true)).collect();
            let mut shuffled = samples.clone();
            shuffled.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
            let a = compute_table_metrics(&[EvalRun::from_samples("s", 1, samples)]).unwrap();
            let b = compute_table_metrics(&[EvalRun::from_samples("s", 1, shuffled)]).unwrap();
            prop_assert_eq!(a.syntax_error_rate, b.syntax_error_rate);
        }
    }

    #[test]
    fn averages_only_converged_iterations() {
        let samples = vec![
            SampleOutcome::synthetic(0, Some(2), false, 7.0, true),
            SampleOutcome::synthetic(1, Some(2), true, 8.0, true),
            SampleOutcome::synthetic(2, Some(1), true, 7.0, true),
            SampleOutcome::synthetic(3, Some(2), true, 7.0, true),
            SampleOutcome::synthetic(4, Some(2), true, 7.5, true),
            SampleOutcome::synthetic(5, None, false, 9.0, false),
        ];
        let m = compute_table_metrics(&[EvalRun::from_samples("Defined Scenario", 5, samples)]).unwrap();
        assert!((m.avg_iterations.unwrap() - 1.8).abs() < 1e-12);
        assert!((m.syntax_error_rate - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.per_scenario[0].c, 5);
        assert_eq!(m.pass_at_k, 1.0);
    }

    #[test]
    fn all_first_try() {
        let samples = (0..4).map(|i| SampleOutcome::synthetic(i, Some(1), true, 1.0, true)).collect();
        let m = compute_table_metrics(&[EvalRun::from_samples("x", 2, samples)]).unwrap();
        assert_eq!(m.avg_iterations, Some(1.0));
        assert_eq!(m.response_time_std, 0.0);
        assert!(m.row().contains("| 1.0 | 0.0 | 1.0 | - | 1.00 |"));
    }

    #[test]
    fn rejects_empty_and_invalid_runs() {
        assert!(compute_table_metrics(&[]).is_err());
        let mut r = EvalRun::from_samples("x", 1, vec![SampleOutcome::synthetic(0, Some(1), true, 1.0, true)]);
        r.human_eval_score = Some(11.0);
        assert!(compute_table_metrics(&[r]).is_err());
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
