use serde::{Deserialize, Serialize};

use super::ResultsError;

/// One `<Flow>` entry of a FlowMonitor `<FlowStats>` section, normalized to
/// seconds and bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub flow_id: u32,
    pub tx_packets: u64,
    pub rx_packets: u64,
    pub lost_packets: u64,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    pub delay_sum: f64,
    pub jitter_sum: f64,
    pub time_first_tx: f64,
    pub time_last_rx: f64,
}

/// Parses an ns-3 time string (`+1.9e+09ns`, `+0.0ns`, `1900000000`, `2.5s`)
/// into seconds. Bare numbers are nanoseconds.
pub fn parse_ns3_time(raw: &str) -> Option<f64> {
    let s = raw.trim();
    let s = s.strip_prefix('+').unwrap_or(s);
    // Longer suffixes first so "ns" is not read as "s".
    const UNITS: [&str; 9] = ["min", "ns", "us", "ms", "ps", "fs", "s", "h", "d"];
    let (num, unit) = UNITS
        .iter()
        .find_map(|u| s.strip_suffix(u).map(|n| (n, *u)))
        .unwrap_or((s, ""));
    let value: f64 = num.parse().ok()?;
    let secs = match unit {
        "" | "ns" => value / 1e9,
        "s" => value,
        "ms" => value / 1e3,
        "us" => value / 1e6,
        "ps" => value / 1e12,
        "fs" => value / 1e15,
        "min" => value * 60.0,
        "h" => value * 3600.0,
        _ => value * 86400.0,
    };
    secs.is_finite().then_some(secs)
}

fn format_time(secs: f64) -> String {
    let ns = secs * 1e9;
    if ns / 1e9 == secs {
        format!("+{ns}ns")
    } else {
        format!("+{secs}s")
    }
}

fn attr<'a>(node: &roxmltree::Node<'a, '_>, name: &str) -> Result<&'a str, ResultsError> {
    node.attribute(name).ok_or_else(|| ResultsError::SchemaMismatch { attr: name.into() })
}

fn count(node: &roxmltree::Node<'_, '_>, name: &str) -> Result<u64, ResultsError> {
    attr(node, name)?
        .trim()
        .parse()
        .map_err(|_| ResultsError::SchemaMismatch { attr: name.into() })
}

fn time(node: &roxmltree::Node<'_, '_>, name: &str) -> Result<f64, ResultsError> {
    parse_ns3_time(attr(node, name)?).ok_or_else(|| ResultsError::SchemaMismatch { attr: name.into() })
}

pub fn parse_flowmonitor(xml: &str) -> Result<Vec<FlowRecord>, ResultsError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| ResultsError::MalformedXml(e.to_string()))?;
    let stats = doc
        .descendants()
        .find(|n| n.has_tag_name("FlowStats"))
        .ok_or_else(|| ResultsError::SchemaMismatch { attr: "FlowStats".into() })?;
    let mut out = Vec::new();
    for flow in stats.children().filter(|n| n.has_tag_name("Flow")) {
        let flow_id: u32 = attr(&flow, "flowId")?
            .trim()
            .parse()
            .map_err(|_| ResultsError::SchemaMismatch { attr: "flowId".into() })?;
        let tx_packets = count(&flow, "txPackets")?;
        let rx_packets = count(&flow, "rxPackets")?;
        let lost_packets = match flow.attribute("lostPackets") {
            Some(_) => count(&flow, "lostPackets")?,
            None => tx_packets.saturating_sub(rx_packets),
        };
        let rec = FlowRecord {
            flow_id,
            tx_packets,
            rx_packets,
            lost_packets,
            tx_bytes: count(&flow, "txBytes")?,
            rx_bytes: count(&flow, "rxBytes")?,
            delay_sum: time(&flow, "delaySum")?,
            jitter_sum: time(&flow, "jitterSum")?,
            time_first_tx: time(&flow, "timeFirstTxPacket")?,
            time_last_rx: time(&flow, "timeLastRxPacket")?,
        };
        if rec.rx_packets > rec.tx_packets {
            return Err(ResultsError::InvalidRecord {
                flow_id,
                reason: format!("rxPackets {} exceeds txPackets {}", rec.rx_packets, rec.tx_packets),
            });
        }
        if rec.rx_packets > 0 && rec.time_last_rx < rec.time_first_tx {
            return Err(ResultsError::InvalidRecord {
                flow_id,
                reason: "timeLastRxPacket precedes timeFirstTxPacket".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Writes records in the FlowMonitor layout accepted by [`parse_flowmonitor`].
pub fn to_flowmonitor_xml(records: &[FlowRecord]) -> String {
    let mut s = String::from("<?xml version=\"1.0\" ?>\n<FlowMonitor>\n  <FlowStats>\n");
    for r in records {
        s.push_str(&format!(
            "    <Flow flowId=\"{}\" timeFirstTxPacket=\"{}\" timeLastRxPacket=\"{}\" delaySum=\"{}\" jitterSum=\"{}\" txBytes=\"{}\" rxBytes=\"{}\" txPackets=\"{}\" rxPackets=\"{}\" lostPackets=\"{}\" timesForwarded=\"0\">\n    </Flow>\n",
            r.flow_id,
            format_time(r.time_first_tx),
            format_time(r.time_last_rx),
            format_time(r.delay_sum),
            format_time(r.jitter_sum),
            r.tx_bytes,
            r.rx_bytes,
            r.tx_packets,
            r.rx_packets,
            r.lost_packets,
        ));
    }
    s.push_str("  </FlowStats>\n</FlowMonitor>\n");
    s
}
