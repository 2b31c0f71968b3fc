use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transport {
    #[serde(rename = "TCP")]
    Tcp,
    #[serde(rename = "UDP")]
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    UMi,
    UMa,
    RMa,
    InH,
    #[serde(rename = "custom")]
    Custom,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Tcp => "TCP",
            Transport::Udp => "UDP",
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::UMi => "UMi",
            Scenario::UMa => "UMa",
            Scenario::RMa => "RMa",
            Scenario::InH => "InH",
            Scenario::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QosThresholds {
    pub max_mean_delay_s: f64,
    pub max_loss_ratio: f64,
}

impl Default for QosThresholds {
    fn default() -> Self {
        Self { max_mean_delay_s: 0.050, max_loss_ratio: 0.02 }
    }
}

/// Structured scenario parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub carrier_frequency_ghz: f64,
    pub bandwidth_mhz: f64,
    pub num_ues: u32,
    pub num_gnbs: u32,
    pub transport_protocol: Transport,
    pub scenario: Scenario,
    pub channel_model: String,
    pub mobility_model: String,
    pub beamforming_enabled: bool,
    pub app_profile: String,
    pub sim_duration_s: f64,
    pub qos: QosThresholds,
}

/// Keys of the key-value exchange format that must be present.
pub const REQUIRED_KEYS: [&str; 5] = ["carrier_frequency", "bandwidth", "num_ues", "num_gnbs", "transport_protocol"];

/// Every key [`SimulationSpec::set`] understands.
pub const KNOWN_KEYS: [&str; 13] = [
    "carrier_frequency",
    "bandwidth",
    "num_ues",
    "num_gnbs",
    "transport_protocol",
    "scenario",
    "channel_model",
    "mobility_model",
    "beamforming_enabled",
    "app_profile",
    "sim_duration",
    "max_delay_ms",
    "max_loss_pct",
];

fn leading_number(value: &str) -> Option<(f64, String)> {
    let v = value.trim();
    let end = v
        .char_indices()
        .find(|&(i, c)| {
            !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+' || ((c == 'e' || c == 'E') && i > 0 && v[i + 1..].starts_with(|d: char| d.is_ascii_digit() || d == '-' || d == '+')))
        })
        .map(|(i, _)| i)
        .unwrap_or(v.len());
    let n: f64 = v[..end].parse().ok()?;
    Some((n, v[end..].trim().to_ascii_lowercase()))
}

fn frequency_ghz(value: &str) -> Result<f64, String> {
    let (n, unit) = leading_number(value).ok_or("not a number")?;
    let ghz = match unit.as_str() {
        "" | "ghz" => n,
        "mhz" => n / 1e3,
        "khz" => n / 1e6,
        "hz" => n / 1e9,
        other => return Err(format!("unknown frequency unit {other:?}")),
    };
    Ok(ghz)
}

fn bandwidth_mhz(value: &str) -> Result<f64, String> {
    let (n, unit) = leading_number(value).ok_or("not a number")?;
    Ok(match unit.as_str() {
        "" | "mhz" => n,
        "ghz" => n * 1e3,
        "khz" => n / 1e3,
        "hz" => n / 1e6,
        other => return Err(format!("unknown bandwidth unit {other:?}")),
    })
}

fn seconds(value: &str) -> Result<f64, String> {
    let (n, unit) = leading_number(value).ok_or("not a number")?;
    Ok(match unit.as_str() {
        "" | "s" | "sec" | "seconds" | "second" => n,
        "ms" => n / 1e3,
        "min" | "minutes" => n * 60.0,
        other => return Err(format!("unknown time unit {other:?}")),
    })
}

fn count(value: &str) -> Result<u32, String> {
    let v = value.trim();
    let word = match v.to_ascii_lowercase().as_str() {
        "one" | "a" | "single" => Some(1),
        "two" => Some(2),
        "three" => Some(3),
        "four" => Some(4),
        _ => None,
    };
    if let Some(n) = word {
        return Ok(n);
    }
    let digits: String = v.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().map_err(|_| format!("{v:?} is not a count"))
}

fn flag(value: &str) -> Result<bool, String> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" | "enabled" => Ok(true),
        "false" | "no" | "0" | "off" | "disabled" => Ok(false),
        other => Err(format!("{other:?} is not a flag")),
    }
}

fn transport(value: &str) -> Result<Transport, String> {
    match value.trim().to_ascii_uppercase().as_str() {
        "TCP" => Ok(Transport::Tcp),
        "UDP" => Ok(Transport::Udp),
        other => Err(format!("unsupported transport {other:?}")),
    }
}

fn scenario(value: &str) -> Result<Scenario, String> {
    match value.trim().to_ascii_lowercase().as_str() {
        "umi" | "umi-streetcanyon" | "urban micro" => Ok(Scenario::UMi),
        "uma" | "urban macro" => Ok(Scenario::UMa),
        "rma" | "rural macro" => Ok(Scenario::RMa),
        "inh" | "inh-officeopen" | "indoor hotspot" => Ok(Scenario::InH),
        "custom" => Ok(Scenario::Custom),
        other => Err(format!("unknown scenario {other:?}")),
    }
}

/// A partially filled spec, as read from one or more LLM replies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpecDraft {
    pub values: BTreeMap<String, String>,
    pub invalid: BTreeMap<String, String>,
}

impl SpecDraft {
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Self {
        let mut d = SpecDraft::default();
        d.merge(pairs);
        d
    }

    /// Later values win.
    pub fn merge(&mut self, pairs: &BTreeMap<String, String>) {
        let probe = SimulationSpec::default_for_probe();
        for (k, v) in pairs {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                continue;
            }
            let mut s = probe.clone();
            match s.set(k, v) {
                Ok(()) => {
                    self.invalid.remove(k);
                    self.values.insert(k.clone(), v.clone());
                }
                Err(e) => {
                    self.values.remove(k);
                    self.invalid.insert(k.clone(), e);
                }
            }
        }
    }

    /// Required keys that are absent or failed validation, in canonical order.
    pub fn missing(&self) -> Vec<String> {
        REQUIRED_KEYS
            .iter()
            .filter(|k| !self.values.contains_key(**k))
            .map(|k| k.to_string())
            .collect()
    }

    pub fn build(&self) -> Result<SimulationSpec, Vec<String>> {
        let missing = self.missing();
        if !missing.is_empty() {
            return Err(missing);
        }
        let mut spec = SimulationSpec::default_for_probe();
        for (k, v) in &self.values {
            spec.set(k, v).map_err(|_| vec![k.clone()])?;
        }
        Ok(spec)
    }
}

impl SimulationSpec {
    /// Defaults for the optional fields; required fields hold placeholders
    /// that are always overwritten by [`SpecDraft::build`].
    fn default_for_probe() -> Self {
        Self {
            carrier_frequency_ghz: 3.5,
            bandwidth_mhz: 20.0,
            num_ues: 1,
            num_gnbs: 1,
            transport_protocol: Transport::Udp,
            scenario: Scenario::UMi,
            channel_model: "3GPP TR 38.901".into(),
            mobility_model: "ConstantPositionMobilityModel".into(),
            beamforming_enabled: false,
            app_profile: "bulk-send".into(),
            sim_duration_s: 1.0,
            qos: QosThresholds::default(),
        }
    }

    /// The scenario of the worked 5G NR example: 100 UEs, one gNB,
    /// 28 GHz, 200 MHz, TCP with beamforming.
    pub fn case_study() -> Self {
        Self {
            carrier_frequency_ghz: 28.0,
            bandwidth_mhz: 200.0,
            num_ues: 100,
            num_gnbs: 1,
            transport_protocol: Transport::Tcp,
            scenario: Scenario::UMi,
            channel_model: "3GPP TR 38.901 UMi-StreetCanyon".into(),
            mobility_model: "ConstantPositionMobilityModel".into(),
            beamforming_enabled: true,
            app_profile: "BulkSend".into(),
            sim_duration_s: 1.0,
            qos: QosThresholds::default(),
        }
    }

    /// Sets one field from its key-value representation, validating it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        match key {
            "carrier_frequency" => {
                let f = frequency_ghz(value)?;
                if !(f > 0.0 && f.is_finite()) {
                    return Err("carrier frequency must be positive".into());
                }
                self.carrier_frequency_ghz = f;
            }
            "bandwidth" => {
                let b = bandwidth_mhz(value)?;
                if !(b > 0.0 && b.is_finite()) {
                    return Err("bandwidth must be positive".into());
                }
                self.bandwidth_mhz = b;
            }
            "num_ues" => {
                let n = count(value)?;
                if n == 0 {
                    return Err("at least one UE is required".into());
                }
                self.num_ues = n;
            }
            "num_gnbs" => {
                let n = count(value)?;
                if n == 0 {
                    return Err("at least one gNB is required".into());
                }
                self.num_gnbs = n;
            }
            "transport_protocol" => self.transport_protocol = transport(value)?,
            "scenario" => self.scenario = scenario(value)?,
            "channel_model" => self.channel_model = non_empty(value)?,
            "mobility_model" => self.mobility_model = non_empty(value)?,
            "beamforming_enabled" => self.beamforming_enabled = flag(value)?,
            "app_profile" => self.app_profile = non_empty(value)?,
            "sim_duration" => {
                let s = seconds(value)?;
                if !(s > 0.0 && s.is_finite()) {
                    return Err("simulation duration must be positive".into());
                }
                self.sim_duration_s = s;
            }
            "max_delay_ms" => {
                let (n, _) = leading_number(value).ok_or("not a number")?;
                if n.is_nan() || n <= 0.0 {
                    return Err("delay threshold must be positive".into());
                }
                self.qos.max_mean_delay_s = n / 1e3;
            }
            "max_loss_pct" => {
                let (n, _) = leading_number(value).ok_or("not a number")?;
                if !(0.0..=100.0).contains(&n) {
                    return Err("loss threshold must be within 0..100 %".into());
                }
                self.qos.max_loss_ratio = n / 100.0;
            }
            other => return Err(format!("unknown field {other:?}")),
        }
        Ok(())
    }

    pub fn with_overrides(&self, overrides: &BTreeMap<String, String>) -> Result<Self, String> {
        let mut s = self.clone();
        for (k, v) in overrides {
            s.set(k, v).map_err(|e| format!("{k}: {e}"))?;
        }
        Ok(s)
    }

    /// Value of a numeric field by key, for thresholds that reference the spec.
    pub fn numeric(&self, key: &str) -> Option<f64> {
        Some(match key {
            "carrier_frequency" => self.carrier_frequency_ghz,
            "bandwidth" => self.bandwidth_mhz,
            "num_ues" => f64::from(self.num_ues),
            "num_gnbs" => f64::from(self.num_gnbs),
            "sim_duration" => self.sim_duration_s,
            "max_delay_ms" => self.qos.max_mean_delay_s * 1e3,
            "max_loss_pct" => self.qos.max_loss_ratio * 100.0,
            _ => return None,
        })
    }

    /// Key-value rendering, the same format agents exchange with the LLM.
    pub fn to_kv(&self) -> String {
        format!(
            "carrier_frequency: {} GHz\nbandwidth: {} MHz\nnum_ues: {}\nnum_gnbs: {}\ntransport_protocol: {}\nscenario: {}\nchannel_model: {}\nmobility_model: {}\nbeamforming_enabled: {}\napp_profile: {}\nsim_duration: {} s\nmax_delay_ms: {}\nmax_loss_pct: {}\n",
            self.carrier_frequency_ghz,
            self.bandwidth_mhz,
            self.num_ues,
            self.num_gnbs,
            self.transport_protocol,
            self.scenario,
            self.channel_model,
            self.mobility_model,
            self.beamforming_enabled,
            self.app_profile,
            self.sim_duration_s,
            self.qos.max_mean_delay_s * 1e3,
            self.qos.max_loss_ratio * 100.0,
        )
    }

    /// ns-3 `CommandLine` style arguments for the payload.
    pub fn to_args(&self, case_id: &str) -> Vec<String> {
        vec![
            format!("--frequencyGHz={}", self.carrier_frequency_ghz),
            format!("--bandwidthMHz={}", self.bandwidth_mhz),
            format!("--ueNum={}", self.num_ues),
            format!("--gnbNum={}", self.num_gnbs),
            format!("--transport={}", self.transport_protocol),
            format!("--scenario={}", self.scenario),
            format!("--mobility={}", self.mobility_model),
            format!("--beamforming={}", u8::from(self.beamforming_enabled)),
            format!("--simTime={}", self.sim_duration_s),
            format!("--caseId={case_id}"),
        ]
    }
}

fn non_empty(v: &str) -> Result<String, String> {
    if v.is_empty() {
        Err("value is empty".into())
    } else {
        Ok(v.to_string())
    }
}

/// Parses `key: value` / `key = value` lines. Keys are lower-cased with
/// spaces and dashes folded to underscores.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let split = match (line.find(':'), line.find('=')) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        let Some(pos) = split else { continue };
        let key = line[..pos].trim().to_ascii_lowercase().replace([' ', '-'], "_");
        let value = line[pos + 1..].trim().trim_matches('"').to_string();
        if !key.is_empty() && !value.is_empty() {
            out.insert(key, value);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn units_are_normalized() {
        let mut s = SimulationSpec::case_study();
        s.set("carrier_frequency", "28e9 Hz").unwrap();
        assert_eq!(s.carrier_frequency_ghz, 28.0);
        s.set("bandwidth", "0.2 GHz").unwrap();
        assert_eq!(s.bandwidth_mhz, 200.0);
        s.set("num_gnbs", "one").unwrap();
        assert_eq!(s.num_gnbs, 1);
        s.set("sim_duration", "500 ms").unwrap();
        assert_eq!(s.sim_duration_s, 0.5);
        assert!(s.set("num_ues", "0").is_err());
        assert!(s.set("transport_protocol", "QUIC").is_err());
        assert!(s.set("bandwidth", "-5 MHz").is_err());
    }

    #[test]
    fn kv_round_trip() {
        let s = SimulationSpec::case_study();
        let draft = SpecDraft::from_pairs(&parse_kv(&s.to_kv()));
        assert_eq!(draft.build().unwrap(), s);
    }

    #[test]
    fn missing_and_invalid_required_fields() {
        let pairs = parse_kv("carrier_frequency: 28 GHz\nnum_ues: zero\nnum_gnbs: 1\ntransport_protocol: TCP\n");
        let d = SpecDraft::from_pairs(&pairs);
        assert_eq!(d.missing(), vec!["bandwidth", "num_ues"]);
        assert!(d.invalid.contains_key("num_ues"));
    }

    #[test]
    fn args_carry_case_and_overrides() {
        let s = SimulationSpec::case_study();
        let mut o = BTreeMap::new();
        o.insert("num_ues".to_string(), "150".to_string());
        let args = s.with_overrides(&o).unwrap().to_args("scale");
        assert!(args.contains(&"--ueNum=150".to_string()));
        assert!(args.contains(&"--caseId=scale".to_string()));
    }
}
