use serde::{Deserialize, Serialize};

use crate::llm_gateway::ChatRequest;
use crate::toolchain::PayloadKind;

use super::prompts::GENERATE_SCRIPT;
use super::spec::SimulationSpec;
use super::{fenced_blocks, fingerprint, render_context, AgentContext, AgentError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedScript {
    pub payload_kind: PayloadKind,
    pub source_text: String,
    pub iteration: u32,
    pub prompt_fingerprint: String,
    pub retrieved_chunk_ids: Vec<String>,
    /// Reply text outside the code block (the staged reasoning).
    pub rationale: String,
}

const ARGUMENTS: &str = "--frequencyGHz, --bandwidthMHz, --ueNum, --gnbNum, --transport, --scenario, --mobility, --beamforming, --simTime, --caseId";

fn kind_of_tag(tag: &str) -> Option<Option<PayloadKind>> {
    match tag {
        "cpp" | "c++" | "cc" | "cxx" | "c" => Some(Some(PayloadKind::Cpp)),
        "python" | "py" | "python3" => Some(Some(PayloadKind::Python)),
        "" => Some(None),
        _ => None,
    }
}

/// Picks the code block: one in the preferred language first, then any
/// tagged code block, then the first untagged block.
fn pick_code(reply: &str, preferred: PayloadKind) -> Option<(PayloadKind, String)> {
    let blocks: Vec<(Option<PayloadKind>, String)> = fenced_blocks(reply)
        .into_iter()
        .filter_map(|(tag, body)| kind_of_tag(&tag).map(|k| (k, body)))
        .filter(|(_, body)| !body.trim().is_empty())
        .collect();
    blocks
        .iter()
        .find(|(k, _)| *k == Some(preferred))
        .or_else(|| blocks.iter().find(|(k, _)| k.is_some()))
        .or_else(|| blocks.first())
        .map(|(k, body)| (k.unwrap_or(preferred), body.clone()))
}

fn strip_code(reply: &str) -> String {
    let mut out = String::new();
    let mut inside = false;
    for line in reply.lines() {
        if line.trim_start().starts_with("```") {
            inside = !inside;
            continue;
        }
        if !inside {
            out.push_str(line);
            out.push('\n');
        }
    }
    out.trim().to_string()
}

/// Static shape check: names of the mandatory blocks the source lacks.
pub fn shape_check(source: &str) -> Vec<String> {
    let has = |needles: &[&str]| needles.iter().any(|n| source.contains(n));
    let mut missing = Vec::new();
    if !(has(&["NodeContainer"]) && has(&["Create("])) {
        missing.push("node creation".to_string());
    }
    if !has(&["InstallGnbDevice", "InstallUeDevice", "InstallEnbDevice", "NetDeviceContainer"]) {
        missing.push("device installation".to_string());
    }
    if !has(&[
        "ApplicationContainer",
        "BulkSendHelper",
        "OnOffHelper",
        "UdpClientHelper",
        "UdpEchoClientHelper",
        "PacketSinkHelper",
    ]) {
        missing.push("application setup".to_string());
    }
    missing
}

fn render_feedback(feedback: &[String]) -> String {
    if feedback.is_empty() {
        return "(none, this is the first attempt)".into();
    }
    feedback.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n")
}

/// Generates iteration `iteration` of the simulation program. Feedback
/// items are placed into the prompt verbatim.
pub fn generate_script(
    spec: &SimulationSpec,
    feedback: &[String],
    iteration: u32,
    ctx: &mut AgentContext<'_>,
) -> Result<GeneratedScript, AgentError> {
    if iteration == 0 {
        return Err(AgentError::InvalidInput("iterations count from 1".into()));
    }
    let preferred = ctx.settings.payload_kind;
    let (language, fence) = match preferred {
        PayloadKind::Cpp => ("C++", "cpp"),
        PayloadKind::Python => ("Python", "python"),
    };
    let query = format!(
        "ns-3 5G NR {} scenario {} traffic {} beamforming {} {} GHz",
        spec.scenario, spec.transport_protocol, spec.app_profile, spec.beamforming_enabled, spec.carrier_frequency_ghz
    );
    let hits = ctx.retrieve(&query);
    let spec_text = spec.to_kv();
    let context = render_context(&hits);
    let feedback_text = render_feedback(feedback);
    let messages = ctx.prompts.render(
        GENERATE_SCRIPT,
        &[
            ("spec", spec_text.trim_end()),
            ("language", language),
            ("fence", fence),
            ("arguments", ARGUMENTS),
            ("context", &context),
            ("feedback", &feedback_text),
        ],
    )?;
    let mut probe = ChatRequest::new(ctx.settings.model.clone(), messages.clone());
    probe.temperature = ctx.settings.temperature;
    let prompt_fingerprint = fingerprint(&probe);
    let reply = ctx.chat("generate", messages)?;
    let (payload_kind, source_text) = pick_code(&reply, preferred).ok_or(AgentError::NoCodeBlock)?;
    let script = GeneratedScript {
        payload_kind,
        source_text,
        iteration,
        prompt_fingerprint,
        retrieved_chunk_ids: hits.into_iter().map(|h| h.chunk.chunk_id).collect(),
        rationale: strip_code(&reply),
    };
    let missing = shape_check(&script.source_text);
    if !missing.is_empty() {
        return Err(AgentError::ShapeCheckFailed { script: Box::new(script), missing });
    }
    Ok(script)
}
