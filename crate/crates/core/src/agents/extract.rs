use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::prompts::{EXTRACT_SPEC, REPAIR_SPEC};
use super::spec::{parse_kv, SimulationSpec, SpecDraft};
use super::{fenced_blocks, render_context, AgentContext, AgentError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub spec: SimulationSpec,
    /// Every raw reply, repair included.
    pub raw_replies: Vec<String>,
    pub retrieved_chunk_ids: Vec<String>,
}

fn reply_pairs(reply: &str) -> BTreeMap<String, String> {
    let blocks = fenced_blocks(reply);
    let body = blocks
        .iter()
        .find(|(lang, _)| lang == "spec")
        .or_else(|| blocks.first())
        .map(|(_, b)| b.as_str())
        .unwrap_or(reply);
    parse_kv(body)
}

fn out_of_domain(pairs: &BTreeMap<String, String>) -> Option<String> {
    let flagged = pairs
        .get("out_of_domain")
        .map(|v| matches!(v.to_ascii_lowercase().as_str(), "true" | "yes" | "1"))
        .unwrap_or(false);
    flagged.then(|| pairs.get("reason").cloned().unwrap_or_else(|| "not a network simulation request".into()))
}

/// Turns free-text requirements into a validated spec. One repair prompt is
/// sent when required fields are missing or invalid.
pub fn extract_spec(requirements: &str, ctx: &mut AgentContext<'_>) -> Result<Extraction, AgentError> {
    if requirements.trim().is_empty() {
        return Err(AgentError::InvalidInput("requirements are empty".into()));
    }
    let hits = ctx.retrieve(requirements);
    let context = render_context(&hits);
    let mut messages = ctx
        .prompts
        .render(EXTRACT_SPEC, &[("requirements", requirements.trim()), ("context", &context)])?;
    let reply = ctx.chat("extract", messages.clone())?;
    let mut raw_replies = vec![reply.clone()];
    let pairs = reply_pairs(&reply);
    if let Some(reason) = out_of_domain(&pairs) {
        return Err(AgentError::OutOfDomain { reason });
    }
    let mut draft = SpecDraft::from_pairs(&pairs);
    if !draft.missing().is_empty() {
        let missing = draft.missing();
        let details = draft
            .invalid
            .iter()
            .map(|(k, e)| format!("{k}: {e}"))
            .collect::<Vec<_>>()
            .join("\n");
        messages.push(super::ChatMessage::assistant(reply));
        messages.extend(ctx.prompts.render(REPAIR_SPEC, &[("missing", &missing.join(", ")), ("details", &details)])?);
        let repair = ctx.chat("extract", messages)?;
        raw_replies.push(repair.clone());
        let pairs = reply_pairs(&repair);
        if let Some(reason) = out_of_domain(&pairs) {
            return Err(AgentError::OutOfDomain { reason });
        }
        draft.merge(&pairs);
    }
    let spec = draft.build().map_err(|missing| AgentError::ExtractionIncomplete { missing })?;
    Ok(Extraction { spec, raw_replies, retrieved_chunk_ids: hits.into_iter().map(|h| h.chunk.chunk_id).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentSettings, PromptLibrary, Transport};
    use crate::llm_gateway::{HashEmbedder, ScriptedProvider};

    const CASE_STUDY_REPLY: &str = "Parameters:\n```spec\ncarrier_frequency: 28 GHz\nbandwidth: 200 MHz\nnum_ues: 100\nnum_gnbs: 1\ntransport_protocol: TCP\nbeamforming_enabled: true\n```\n";

    fn run(replies: &[&str], req: &str) -> (Result<Extraction, AgentError>, usize) {
        let provider = ScriptedProvider::from_replies(replies.iter().copied()).unwrap();
        let embedder = HashEmbedder::new(32);
        let prompts = PromptLibrary::builtin();
        let settings = AgentSettings::default();
        let mut ctx = AgentContext::new(&provider, &embedder, None, &prompts, &settings);
        let r = extract_spec(req, &mut ctx);
        (r, provider.consumed())
    }

    #[test]
    fn case_study_prompt() {
        let (r, used) = run(&[CASE_STUDY_REPLY], "Simulate a 5G New Radio environment with 100 UEs and one gNB at 28 GHz with 200 MHz bandwidth.");
        let s = r.unwrap().spec;
        assert_eq!(used, 1);
        assert_eq!((s.carrier_frequency_ghz, s.bandwidth_mhz, s.num_ues, s.num_gnbs), (28.0, 200.0, 100, 1));
        assert_eq!(s.transport_protocol, Transport::Tcp);
        assert!(s.beamforming_enabled);
        assert_eq!(s.sim_duration_s, 1.0);
    }

    #[test]
    fn repair_fills_the_gap() {
        let first = "```spec\ncarrier_frequency: 28 GHz\nnum_ues: 100\nnum_gnbs: 1\ntransport_protocol: TCP\n```";
        let (r, used) = run(&[first, "```spec\nbandwidth: 200 MHz\n```"], "x");
        assert_eq!(used, 2);
        let e = r.unwrap();
        assert_eq!(e.spec.bandwidth_mhz, 200.0);
        assert_eq!(e.raw_replies.len(), 2);
    }

    #[test]
    fn missing_after_repair() {
        let first = "```spec\ncarrier_frequency: 28 GHz\nnum_ues: 100\nnum_gnbs: 1\ntransport_protocol: TCP\n```";
        let (r, _) = run(&[first, first], "x");
        assert_eq!(r.unwrap_err(), AgentError::ExtractionIncomplete { missing: vec!["bandwidth".into()] });
    }

    #[test]
    fn out_of_domain_request() {
        let (r, _) = run(&["```spec\nout_of_domain: true\nreason: poetry is not a simulation\n```"], "write a poem");
        assert!(matches!(r, Err(AgentError::OutOfDomain { .. })));
    }

    #[test]
    fn empty_requirements_rejected() {
        let (r, used) = run(&[CASE_STUDY_REPLY], "  ");
        assert!(matches!(r, Err(AgentError::InvalidInput(_))));
        assert_eq!(used, 0);
    }
}
