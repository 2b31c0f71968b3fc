use serde::{Deserialize, Serialize};

use super::{FlowRecord, ResultsError};

pub const KPI_REPORT_SCHEMA: &str = "nsagent.kpi/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowKpi {
    pub flow_id: u32,
    pub tx_packets: u64,
    pub rx_packets: u64,
    pub rx_bytes: u64,
    /// bit/s over `time_last_rx - time_first_tx`.
    pub throughput_bps: f64,
    /// Seconds; absent when nothing was received.
    pub mean_delay_s: Option<f64>,
    /// Seconds; absent with fewer than two received packets.
    pub mean_jitter_s: Option<f64>,
    pub loss_ratio: f64,
    pub delivery_ratio: f64,
}

/// Aggregates across flows. Throughput, delay and jitter are weighted by each
/// flow's received bytes; loss is packet-weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateKpi {
    pub flows: usize,
    pub active_flows: usize,
    pub throughput_bps: f64,
    pub total_throughput_bps: f64,
    pub mean_delay_s: Option<f64>,
    pub mean_jitter_s: Option<f64>,
    pub loss_ratio: f64,
    pub tx_packets: u64,
    pub rx_packets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiSet {
    pub flows: Vec<FlowKpi>,
    /// `None` when there are no flows.
    pub aggregate: Option<AggregateKpi>,
}

/// The machine-readable KPI document handed to agents and the UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub schema: String,
    #[serde(flatten)]
    pub kpis: KpiSet,
}

impl KpiSet {
    pub fn to_report(&self) -> KpiReport {
        KpiReport { schema: KPI_REPORT_SCHEMA.to_string(), kpis: self.clone() }
    }

    /// Plain-text table used in prompts and CLI output.
    pub fn table(&self) -> String {
        let mut s = String::from("flow | throughput (Mbit/s) | mean delay (ms) | jitter (ms) | loss (%)\n");
        let ms = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.3}", x * 1e3));
        for f in &self.flows {
            s.push_str(&format!(
                "{} | {:.3} | {} | {} | {:.3}\n",
                f.flow_id,
                f.throughput_bps / 1e6,
                ms(f.mean_delay_s),
                ms(f.mean_jitter_s),
                f.loss_ratio * 100.0
            ));
        }
        match &self.aggregate {
            Some(a) => s.push_str(&format!(
                "all ({} flows, {} active) | {:.3} | {} | {} | {:.3}\n",
                a.flows,
                a.active_flows,
                a.throughput_bps / 1e6,
                ms(a.mean_delay_s),
                ms(a.mean_jitter_s),
                a.loss_ratio * 100.0
            )),
            None => s.push_str("no traffic observed\n"),
        }
        s
    }
}

fn flow_kpi(r: &FlowRecord) -> Result<FlowKpi, ResultsError> {
    let duration = r.time_last_rx - r.time_first_tx;
    let throughput_bps = if r.rx_packets == 0 {
        0.0
    } else if duration <= 0.0 {
        return Err(ResultsError::DegenerateFlow { flow_id: r.flow_id });
    } else {
        r.rx_bytes as f64 * 8.0 / duration
    };
    let mean_delay_s = (r.rx_packets > 0).then(|| r.delay_sum / r.rx_packets as f64);
    let mean_jitter_s = (r.rx_packets >= 2).then(|| r.jitter_sum / (r.rx_packets - 1) as f64);
    let loss_ratio = if r.tx_packets == 0 {
        0.0
    } else {
        r.tx_packets.saturating_sub(r.rx_packets) as f64 / r.tx_packets as f64
    };
    Ok(FlowKpi {
        flow_id: r.flow_id,
        tx_packets: r.tx_packets,
        rx_packets: r.rx_packets,
        rx_bytes: r.rx_bytes,
        throughput_bps,
        mean_delay_s,
        mean_jitter_s,
        loss_ratio,
        delivery_ratio: 1.0 - loss_ratio,
    })
}

fn weighted(flows: &[FlowKpi], value: impl Fn(&FlowKpi) -> Option<f64>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for f in flows {
        if let Some(v) = value(f) {
            let w = f.rx_bytes as f64;
            num += w * v;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn compute_kpis(records: &[FlowRecord]) -> Result<KpiSet, ResultsError> {
    let flows = records.iter().map(flow_kpi).collect::<Result<Vec<_>, _>>()?;
    if flows.is_empty() {
        return Ok(KpiSet { flows, aggregate: None });
    }
    let tx_packets: u64 = flows.iter().map(|f| f.tx_packets).sum();
    let rx_packets: u64 = flows.iter().map(|f| f.rx_packets).sum();
    let loss_ratio = if tx_packets == 0 {
        0.0
    } else {
        tx_packets.saturating_sub(rx_packets) as f64 / tx_packets as f64
    };
    let aggregate = AggregateKpi {
        flows: flows.len(),
        active_flows: flows.iter().filter(|f| f.rx_packets > 0).count(),
        throughput_bps: weighted(&flows, |f| Some(f.throughput_bps)).unwrap_or(0.0),
        total_throughput_bps: flows.iter().map(|f| f.throughput_bps).sum(),
        mean_delay_s: weighted(&flows, |f| f.mean_delay_s),
        mean_jitter_s: weighted(&flows, |f| f.mean_jitter_s),
        loss_ratio,
        tx_packets,
        rx_packets,
    };
    Ok(KpiSet { flows, aggregate: Some(aggregate) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> FlowRecord {
        FlowRecord {
            flow_id: 1,
            tx_packets: 100,
            rx_packets: 95,
            lost_packets: 5,
            tx_bytes: 130000,
            rx_bytes: 125000,
            delay_sum: 1.9,
            jitter_sum: 0.94,
            time_first_tx: 0.0,
            time_last_rx: 1.0,
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1e-300)
    }

    #[test]
    fn hand_computed_fixture() {
        let k = compute_kpis(&[fixture()]).unwrap();
        let f = &k.flows[0];
        // 125000 * 8 / 1.0, 1.9 / 95, 0.94 / 94, 5 / 100
        assert!(close(f.throughput_bps, 1_000_000.0));
        assert!(close(f.mean_delay_s.unwrap(), 0.02));
        assert!(close(f.mean_jitter_s.unwrap(), 0.01));
        assert!(close(f.loss_ratio, 0.05));
        let a = k.aggregate.unwrap();
        assert!(close(a.throughput_bps, 1_000_000.0));
        assert!(close(a.mean_delay_s.unwrap(), 0.02));
    }

    #[test]
    fn nothing_received() {
        let r = FlowRecord { rx_packets: 0, rx_bytes: 0, delay_sum: 0.0, jitter_sum: 0.0, ..fixture() };
        let f = &compute_kpis(&[r]).unwrap().flows[0];
        assert_eq!(f.throughput_bps, 0.0);
        assert_eq!(f.mean_delay_s, None);
        assert_eq!(f.loss_ratio, 1.0);
    }

    #[test]
    fn single_packet_has_no_jitter() {
        let r = FlowRecord { rx_packets: 1, ..fixture() };
        assert_eq!(compute_kpis(&[r]).unwrap().flows[0].mean_jitter_s, None);
    }

    #[test]
    fn degenerate_duration() {
        let r = FlowRecord { time_last_rx: 0.0, ..fixture() };
        assert_eq!(compute_kpis(&[r]), Err(ResultsError::DegenerateFlow { flow_id: 1 }));
    }

    #[test]
    fn empty_records_have_no_aggregate() {
        let k = compute_kpis(&[]).unwrap();
        assert!(k.aggregate.is_none());
        assert!(k.table().contains("no traffic observed"));
    }

    #[test]
    fn aggregate_is_rx_byte_weighted() {
        let a = fixture();
        let b = FlowRecord { flow_id: 2, rx_bytes: 375000, time_last_rx: 3.0, delay_sum: 9.5, ..fixture() };
        let k = compute_kpis(&[a, b]).unwrap();
        let agg = k.aggregate.unwrap();
        // both flows at 1 Mbit/s; delays 0.02 and 0.1 weighted 1:3
        assert!(close(agg.throughput_bps, 1_000_000.0));
        assert!(close(agg.total_throughput_bps, 2_000_000.0));
        assert!(close(agg.mean_delay_s.unwrap(), (0.02 + 3.0 * 0.1) / 4.0));
        assert!(close(agg.loss_ratio, 0.05));
    }

    #[test]
    fn report_document_has_schema_tag() {
        let v = serde_json::to_value(compute_kpis(&[fixture()]).unwrap().to_report()).unwrap();
        assert_eq!(v["schema"], KPI_REPORT_SCHEMA);
        assert!(v["flows"].is_array());
        assert!(v["aggregate"]["throughput_bps"].is_number());
    }
}
