//! The four pipeline agents: extraction and generation, test design,
//! execution, and interpretation. Each is a function over session data plus
//! an [`AgentContext`] carrying the LLM, retrieval and prompt dependencies.

mod design;
mod execute;
mod extract;
mod generate;
mod interpret;
pub mod prompts;
mod spec;

pub use design::{design_tests, Check, CheckValue, Cmp, TestCase, TestCaseKind, CaseOrigin, TestSuite, METRICS};
pub use execute::{execute_and_collect, CaseResult, CheckOutcome, CompileRecord, ExecutionReport};
pub use extract::{extract_spec, Extraction};
pub use generate::{generate_script, shape_check, GeneratedScript};
pub use interpret::{interpret_results, parse_interpretation, Finding, InterpretationReport, Verdict};
pub use prompts::{PromptLibrary, PromptTemplate};
pub use spec::{parse_kv, QosThresholds, Scenario, SimulationSpec, SpecDraft, Transport, KNOWN_KEYS, REQUIRED_KEYS};

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::knowledge_store::{self, SearchHit, VectorStore};
use crate::llm_gateway::{complete_chat, ChatMessage, ChatProvider, ChatRequest, Embedder, LlmError, TokenUsage};
use crate::toolchain::{InvocationMethod, PayloadKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("extraction incomplete, missing: {}", missing.join(", "))]
    ExtractionIncomplete { missing: Vec<String> },
    #[error("request is not a network simulation task: {reason}")]
    OutOfDomain { reason: String },
    #[error("reply contains no extractable code block")]
    NoCodeBlock,
    #[error("generated script lacks: {}", missing.join(", "))]
    ShapeCheckFailed { script: Box<GeneratedScript>, missing: Vec<String> },
    #[error("invalid test suite: {0}")]
    InvalidSuite(String),
    #[error("toolchain unavailable: {0}")]
    ToolchainUnavailable(String),
    #[error("malformed interpretation: {0}")]
    MalformedInterpretation(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("prompt: {0}")]
    Prompt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSettings {
    pub model: String,
    pub temperature: f64,
    pub retrieval_k: usize,
    pub payload_kind: PayloadKind,
    pub invocation: InvocationMethod,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            retrieval_k: 4,
            payload_kind: PayloadKind::Cpp,
            invocation: InvocationMethod::Native,
        }
    }
}

/// One recorded LLM exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCall {
    pub agent: String,
    pub model: String,
    pub fingerprint: String,
    pub messages: Vec<ChatMessage>,
    pub reply: String,
    pub latency_s: f64,
    pub usage: TokenUsage,
}

pub struct AgentContext<'a> {
    pub provider: &'a dyn ChatProvider,
    pub embedder: &'a dyn Embedder,
    pub store: Option<&'a VectorStore>,
    pub prompts: &'a PromptLibrary,
    pub settings: &'a AgentSettings,
    calls: Vec<LlmCall>,
}

impl<'a> AgentContext<'a> {
    pub fn new(
        provider: &'a dyn ChatProvider,
        embedder: &'a dyn Embedder,
        store: Option<&'a VectorStore>,
        prompts: &'a PromptLibrary,
        settings: &'a AgentSettings,
    ) -> Self {
        Self { provider, embedder, store, prompts, settings, calls: Vec::new() }
    }

    pub fn calls(&self) -> &[LlmCall] {
        &self.calls
    }

    pub fn take_calls(&mut self) -> Vec<LlmCall> {
        std::mem::take(&mut self.calls)
    }

    pub(crate) fn chat(&mut self, agent: &str, messages: Vec<ChatMessage>) -> Result<String, AgentError> {
        let mut req = ChatRequest::new(self.settings.model.clone(), messages);
        req.temperature = self.settings.temperature;
        let fingerprint = fingerprint(&req);
        let resp = complete_chat(self.provider, &req)?;
        tracing::debug!(agent, latency = resp.latency, "llm call");
        self.calls.push(LlmCall {
            agent: agent.to_string(),
            model: req.model,
            fingerprint,
            messages: req.messages,
            reply: resp.content.clone(),
            latency_s: resp.latency,
            usage: resp.usage,
        });
        Ok(resp.content)
    }

    /// Top-k chunks for `query`; an absent or empty store yields nothing.
    pub(crate) fn retrieve(&self, query: &str) -> Vec<SearchHit> {
        let Some(store) = self.store else { return Vec::new() };
        if store.is_empty() || self.settings.retrieval_k == 0 {
            return Vec::new();
        }
        match knowledge_store::search(query, self.settings.retrieval_k, self.embedder, store) {
            Ok(hits) => hits,
            Err(e) => {
                tracing::warn!(error = %e, "retrieval failed, continuing without context");
                Vec::new()
            }
        }
    }
}

/// SHA-256 over the canonical JSON of the request (model, messages, sampling).
pub fn fingerprint(req: &ChatRequest) -> String {
    let bytes = serde_json::to_vec(req).expect("requests serialize");
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn render_context(hits: &[SearchHit]) -> String {
    if hits.is_empty() {
        return "(no documentation retrieved)".into();
    }
    hits.iter()
        .map(|h| format!("[{}]\n{}", h.chunk.chunk_id, h.chunk.text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?ms)^[ \t]*```[ \t]*([A-Za-z0-9_+#.-]*)[^\n]*\n(.*?)^[ \t]*```").expect("fence regex"));

/// Fenced blocks of `text` as `(language tag, body)`, in order.
pub fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    FENCE
        .captures_iter(text)
        .map(|c| (c[1].to_ascii_lowercase(), c[2].to_string()))
        .collect()
}
