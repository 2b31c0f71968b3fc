//! Evidence layer: simulation outputs in, KPIs and classified errors out.

mod classify;
mod flowmon;
mod kpi;
mod pcap;

pub use classify::{classify_errors, ErrorClass, ErrorKind, TIMEOUT_MARKER};
pub use flowmon::{parse_flowmonitor, parse_ns3_time, to_flowmonitor_xml, FlowRecord};
pub use kpi::{compute_kpis, AggregateKpi, FlowKpi, KpiReport, KpiSet, KPI_REPORT_SCHEMA};
pub use pcap::{read_pcap_summary, PcapSummary};

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResultsError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("FlowMonitor schema mismatch: missing or invalid attribute `{attr}`")]
    SchemaMismatch { attr: String },
    #[error("flow {flow_id}: {reason}")]
    InvalidRecord { flow_id: u32, reason: String },
    #[error("flow {flow_id} has received packets but a non-positive duration")]
    DegenerateFlow { flow_id: u32 },
    #[error("pcap: {0}")]
    Pcap(String),
}

/// Hook for custom trace sources. Implementations turn a produced artifact
/// into named scalar metrics.
pub trait TraceSource: Send + Sync {
    fn name(&self) -> &str;
    fn accepts(&self, file_name: &str) -> bool;
    fn extract(&self, content: &[u8]) -> BTreeMap<String, f64>;
}

/// Reads `KPI <name>=<value>` lines that simulation payloads print to stdout.
pub fn parse_trace_metrics(stdout: &str) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for line in stdout.lines() {
        let Some(rest) = line.trim().strip_prefix("KPI ") else { continue };
        let Some((name, value)) = rest.split_once('=') else { continue };
        if let Ok(v) = value.trim().parse::<f64>() {
            if v.is_finite() {
                out.insert(name.trim().to_string(), v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_metric_lines() {
        let m = parse_trace_metrics("boot\nKPI attached_ues=100\n  KPI sinr_db = 12.5\nKPI broken=abc\nKPI x=inf\n");
        assert_eq!(m.len(), 2);
        assert_eq!(m["attached_ues"], 100.0);
        assert_eq!(m["sinr_db"], 12.5);
    }
}
