use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{markdown_row, mean_std, EvalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryClass {
    Regular,
    CppGen,
    PyGen,
    ExecDebugInterpret,
}

impl QueryClass {
    pub const ALL: [QueryClass; 4] =
        [QueryClass::Regular, QueryClass::CppGen, QueryClass::PyGen, QueryClass::ExecDebugInterpret];

    pub fn label(self) -> &'static str {
        match self {
            QueryClass::Regular => "Regular Query",
            QueryClass::CppGen => "ns-3 C++ Generation",
            QueryClass::PyGen => "ns-3 Python Generation",
            QueryClass::ExecDebugInterpret => "ns-3 Execution, Debugging and Interpretation",
        }
    }
}

/// One query of a class; called once per trial.
pub type QueryRunner<'a> = Box<dyn FnMut() -> Result<(), String> + 'a>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTiming {
    pub class: QueryClass,
    pub trials: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

/// Runs every runner `trials` times, sequentially, and reports wall-time mean
/// and sample standard deviation per entry.
pub fn time_query_classes(workload: &mut [(QueryClass, QueryRunner<'_>)], trials: usize) -> Result<Vec<ClassTiming>, EvalError> {
    if trials < 3 {
        return Err(EvalError::Domain(format!("need at least 3 trials per class, got {trials}")));
    }
    let mut out = Vec::with_capacity(workload.len());
    for (class, run) in workload.iter_mut() {
        let mut times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let t = Instant::now();
            run().map_err(|e| EvalError::Runner(format!("{}: {e}", class.label())))?;
            times.push(t.elapsed().as_secs_f64());
        }
        let (mean_s, std_s) = mean_std(&times);
        out.push(ClassTiming { class: *class, trials, mean_s, std_s });
    }
    Ok(out)
}

pub fn timing_table(rows: &[ClassTiming]) -> String {
    let mut out = format!(
        "{}\n{}\n",
        markdown_row(&["Query Type".into(), "Avg. Response Time (s)".into(), "Std. Dev. (s)".into()]),
        markdown_row(&["---".into(), "---".into(), "---".into()])
    );
    for r in rows {
        out.push_str(&markdown_row(&[r.class.label().into(), format!("{:.1}", r.mean_s), format!("{:.1}", r.std_s)]));
        out.push('\n');
    }
    out
}
