use serde::{Deserialize, Serialize};

use super::ResultsError;

/// Packet and byte counts of a classic libpcap capture. No dissection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcapSummary {
    pub packets: u64,
    /// Sum of original (on-the-wire) lengths.
    pub bytes: u64,
    pub link_type: u32,
    pub nanosecond_timestamps: bool,
}

pub fn read_pcap_summary(data: &[u8]) -> Result<PcapSummary, ResultsError> {
    if data.len() < 24 {
        return Err(ResultsError::Pcap("file shorter than the global header".into()));
    }
    let magic = [data[0], data[1], data[2], data[3]];
    let (big_endian, nanos) = match magic {
        [0xd4, 0xc3, 0xb2, 0xa1] => (false, false),
        [0xa1, 0xb2, 0xc3, 0xd4] => (true, false),
        [0x4d, 0x3c, 0xb2, 0xa1] => (false, true),
        [0xa1, 0xb2, 0x3c, 0x4d] => (true, true),
        _ => return Err(ResultsError::Pcap("unknown magic number".into())),
    };
    let u32_at = |off: usize| {
        let b = [data[off], data[off + 1], data[off + 2], data[off + 3]];
        if big_endian { u32::from_be_bytes(b) } else { u32::from_le_bytes(b) }
    };
    let link_type = u32_at(20);
    let (mut packets, mut bytes, mut off) = (0u64, 0u64, 24usize);
    while off < data.len() {
        if off + 16 > data.len() {
            return Err(ResultsError::Pcap(format!("truncated record header at byte {off}")));
        }
        let incl = u32_at(off + 8) as usize;
        let orig = u32_at(off + 12);
        off += 16;
        if off + incl > data.len() {
            return Err(ResultsError::Pcap(format!("truncated packet data at byte {off}")));
        }
        off += incl;
        packets += 1;
        bytes += u64::from(orig);
    }
    Ok(PcapSummary { packets, bytes, link_type, nanosecond_timestamps: nanos })
}
