use serde::{Deserialize, Serialize};

use super::{InvocationMethod, Payload, ToolError, ToolInvocation, Toolchain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: InvocationMethod,
    pub base: Stat,
    pub overhead: Stat,
    pub total: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub trials: usize,
    pub native: MethodStats,
    pub wrapped: MethodStats,
    pub ordering: String,
}

impl OverheadReport {
    pub fn table(&self) -> String {
        let row = |label: &str, m: &MethodStats| {
            format!(
                "{label} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3}\n",
                m.base.mean, m.base.std, m.overhead.mean, m.overhead.std, m.total.mean, m.total.std
            )
        };
        let mut s = String::from("Invocation Method | Base ns-3 Time (s) | Overhead (s) | Total Time (s)\n");
        s.push_str(&row("Python Invocation (via subprocess)", &self.wrapped));
        s.push_str(&row("C++ Invocation (direct)", &self.native));
        s
    }
}

/// Runs the payload `trials` times per invocation method (compiled once) and
/// reports per-method timing statistics. Trials are sequential and
/// interleaved so both methods see the same machine conditions.
pub fn benchmark_invocation(
    toolchain: &Toolchain,
    payload: Payload<'_>,
    args: &[String],
    trials: usize,
) -> Result<OverheadReport, ToolError> {
    if trials < 3 {
        return Err(ToolError::InvalidInvocation(format!("need at least 3 trials, got {trials}")));
    }
    let prepared = toolchain.prepare(payload)?;
    let native_inv = ToolInvocation::native(args.to_vec());
    let wrapped_inv = ToolInvocation::wrapped(args.to_vec());
    let mut samples: [Vec<[f64; 3]>; 2] = [Vec::new(), Vec::new()];
    for _ in 0..trials {
        for (slot, inv) in [(0, &native_inv), (1, &wrapped_inv)] {
            let o = toolchain.run_prepared(&prepared, inv)?;
            if o.timed_out {
                return Err(ToolError::Timeout { stage: "run".into(), after: toolchain.config().limits.run_timeout });
            }
            samples[slot].push([o.timings.base, o.timings.overhead, o.timings.total]);
        }
    }
    let stats = |method, xs: &[[f64; 3]]| {
        let col = |i: usize| xs.iter().map(|r| r[i]).collect::<Vec<_>>();
        MethodStats { method, base: Stat::of(&col(0)), overhead: Stat::of(&col(1)), total: Stat::of(&col(2)) }
    };
    let native = stats(InvocationMethod::Native, &samples[0]);
    let wrapped = stats(InvocationMethod::Wrapped, &samples[1]);
    let ordering = if native.overhead.mean < wrapped.overhead.mean {
        format!(
            "direct invocation has the smaller overhead ({:.3} s vs {:.3} s)",
            native.overhead.mean, wrapped.overhead.mean
        )
    } else {
        format!(
            "wrapped invocation has the smaller overhead ({:.3} s vs {:.3} s)",
            wrapped.overhead.mean, native.overhead.mean
        )
    };
    Ok(OverheadReport { trials, native, wrapped, ordering })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolchain::{FakeSimulator, PayloadKind, ToolchainConfig};

    #[test]
    fn stat_basics() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_trials() {
        let tc = Toolchain::new(ToolchainConfig::fake(FakeSimulator::default()));
        let p = Payload { kind: PayloadKind::Cpp, source: "int main(){}" };
        assert!(matches!(benchmark_invocation(&tc, p, &[], 1), Err(ToolError::InvalidInvocation(_))));
    }
}
