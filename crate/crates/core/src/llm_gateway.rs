//! Chat-completion and embedding access over the OpenAI-compatible wire
//! protocol, plus deterministic offline providers used by tests and replays.

use std::fmt;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed (status {status})")]
    AuthFailed { status: u16 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("scripted transcript exhausted after {consumed} replies")]
    TranscriptExhausted { consumed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self { model: model.into(), messages, temperature: 0.0, max_tokens: None }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| LlmError::InvalidRequest("messages must not be empty".into()))?;
        if first.role == Role::Assistant {
            return Err(LlmError::InvalidRequest(
                "first message must come from system or user".into(),
            ));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == Some(0) {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.model.trim().is_empty() {
            return Err(LlmError::InvalidRequest("model name is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: TokenUsage,
    /// Wall-clock seconds, including retries.
    pub latency: f64,
}

/// A dense embedding. All vectors inside one index share a dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// API key wrapper. Never printed and never serialized.
#[derive(Clone, Default, Deserialize)]
#[serde(transparent)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Secret(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    #[serde(default, skip_serializing)]
    pub api_key: Secret,
    #[serde(default = "default_model")]
    pub default_model: String,
    #[serde(default = "default_embedding_model")]
    pub embedding_model: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Initial backoff in seconds; doubles after every failed attempt.
    #[serde(default = "default_backoff")]
    pub retry_backoff: f64,
    #[serde(default = "default_request_timeout")]
    pub request_timeout: f64,
}

fn default_model() -> String {
    "gpt-4o-mini".into()
}
fn default_embedding_model() -> String {
    "text-embedding-3-small".into()
}
fn default_max_retries() -> u32 {
    2
}
fn default_backoff() -> f64 {
    0.5
}
fn default_request_timeout() -> f64 {
    120.0
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key: Secret::default(),
            default_model: default_model(),
            embedding_model: default_embedding_model(),
            max_retries: default_max_retries(),
            retry_backoff: default_backoff(),
            request_timeout: default_request_timeout(),
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

pub trait Embedder: Send + Sync {
    /// One vector per input text, same order, uniform dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, LlmError>;
}

/// Validates `req` and forwards it to `provider`.
pub fn complete_chat(provider: &dyn ChatProvider, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
    req.validate()?;
    provider.complete(req)
}

/// Validates the inputs, embeds them and checks the result shape.
pub fn embed_texts(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<Embedding>, LlmError> {
    if texts.is_empty() {
        return Err(LlmError::InvalidRequest("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(LlmError::InvalidRequest(format!("text {i} is empty")));
    }
    let vectors = embedder.embed(texts)?;
    check_embedding_shape(texts.len(), &vectors)?;
    Ok(vectors)
}

fn check_embedding_shape(expected_len: usize, vectors: &[Embedding]) -> Result<(), LlmError> {
    if vectors.len() != expected_len {
        return Err(LlmError::MalformedResponse(format!(
            "expected {expected_len} embeddings, got {}",
            vectors.len()
        )));
    }
    let dim = vectors.first().map(Embedding::dimension).unwrap_or(0);
    if dim == 0 {
        return Err(LlmError::MalformedResponse("zero-dimensional embedding".into()));
    }
    if let Some(bad) = vectors.iter().find(|v| v.dimension() != dim) {
        return Err(LlmError::DimensionMismatch { expected: dim, got: bad.dimension() });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP client

pub struct OpenAiClient {
    cfg: ProviderConfig,
    http: reqwest::blocking::Client,
}

enum AttemptError {
    Transient { throttled: bool, detail: String },
    Fatal(LlmError),
}

impl OpenAiClient {
    pub fn new(cfg: ProviderConfig) -> Result<Self, LlmError> {
        if cfg.api_key.is_empty() {
            return Err(LlmError::InvalidRequest("api key is not configured".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.request_timeout.max(0.001)))
            .build()
            .map_err(|e| LlmError::ProviderUnreachable(e.to_string()))?;
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    /// POSTs `body`, retrying throttles, server errors and network failures
    /// with exponential backoff.
    fn post_with_retry(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let url = self.endpoint(path);
        let attempts = self.cfg.max_retries + 1;
        let mut backoff = self.cfg.retry_backoff.max(0.0);
        let mut last_throttled = false;
        let mut last_detail = String::new();
        for attempt in 1..=attempts {
            match self.post_once(&url, body) {
                Ok(v) => return Ok(v),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient { throttled, detail }) => {
                    tracing::debug!(attempt, %detail, "transient provider failure");
                    last_throttled = throttled;
                    last_detail = detail;
                    if attempt < attempts {
                        std::thread::sleep(Duration::from_secs_f64(backoff));
                        backoff *= 2.0;
                    }
                }
            }
        }
        if last_throttled {
            Err(LlmError::RateLimited { attempts })
        } else {
            Err(LlmError::ProviderUnreachable(last_detail))
        }
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, AttemptError> {
        let resp = self
            .http
            .post(url)
            .bearer_auth(self.cfg.api_key.expose())
            .json(body)
            .send()
            .map_err(|e| AttemptError::Transient { throttled: false, detail: e.to_string() })?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .json::<Value>()
                .map_err(|e| AttemptError::Fatal(LlmError::MalformedResponse(e.to_string()))),
            401 | 403 => Err(AttemptError::Fatal(LlmError::AuthFailed { status })),
            429 => Err(AttemptError::Transient { throttled: true, detail: "status 429".into() }),
            500..=599 => Err(AttemptError::Transient {
                throttled: false,
                detail: format!("status {status}"),
            }),
            _ => {
                let text = resp.text().unwrap_or_default();
                Err(AttemptError::Fatal(LlmError::InvalidRequest(format!(
                    "status {status}: {}",
                    text.chars().take(300).collect::<String>()
                ))))
            }
        }
    }
}

impl ChatProvider for OpenAiClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        let started = Instant::now();
        let mut body = json!({
            "model": req.model,
            "messages": req.messages.iter()
                .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
                .collect::<Vec<_>>(),
            "temperature": req.temperature,
        });
        if let Some(max) = req.max_tokens {
            body["max_tokens"] = json!(max);
        }
        let v = self.post_with_retry("chat/completions", &body)?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))?
            .to_string();
        let usage = TokenUsage {
            prompt: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion: v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        };
        Ok(ChatResponse { content, usage, latency: started.elapsed().as_secs_f64() })
    }
}

impl Embedder for OpenAiClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, LlmError> {
        let body = json!({ "model": self.cfg.embedding_model, "input": texts });
        let v = self.post_with_retry("embeddings", &body)?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::MalformedResponse("missing data array".into()))?;
        let mut indexed = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| LlmError::MalformedResponse("missing embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| LlmError::MalformedResponse("non-numeric embedding".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            indexed.push((index, Embedding(values)));
        }
        indexed.sort_by_key(|(i, _)| *i);
        let vectors: Vec<Embedding> = indexed.into_iter().map(|(_, e)| e).collect();
        check_embedding_shape(texts.len(), &vectors)?;
        Ok(vectors)
    }
}

// ---------------------------------------------------------------------------
// Scripted provider

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// Free-form label of the turn this reply is meant for; informational only.
    pub tag: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        serde_json::from_str(text).map_err(|e| LlmError::InvalidRequest(format!("bad transcript: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidRequest(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayRecord {
    pub tag: String,
    pub request: ChatRequest,
    pub reply: String,
}

#[derive(Debug, Default)]
struct ReplayCursor {
    next: usize,
    log: Vec<ReplayRecord>,
}

/// Replays a fixed list of replies in order, regardless of request content.
#[derive(Debug)]
pub struct ScriptedProvider {
    entries: Vec<TranscriptEntry>,
    cursor: Mutex<ReplayCursor>,
}

impl ScriptedProvider {
    pub fn new(transcript: Transcript) -> Result<Self, LlmError> {
        if transcript.entries.is_empty() {
            return Err(LlmError::InvalidRequest("transcript is empty".into()));
        }
        Ok(Self { entries: transcript.entries, cursor: Mutex::new(ReplayCursor::default()) })
    }

    /// Convenience constructor from bare replies.
    pub fn from_replies<I, S>(replies: I) -> Result<Self, LlmError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries = replies
            .into_iter()
            .enumerate()
            .map(|(i, r)| TranscriptEntry { tag: format!("turn-{}", i + 1), reply: r.into() })
            .collect();
        Self::new(Transcript { entries })
    }

    pub fn consumed(&self) -> usize {
        self.cursor.lock().unwrap().next
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.consumed()
    }

    pub fn replay_log(&self) -> Vec<ReplayRecord> {
        self.cursor.lock().unwrap().log.clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let started = Instant::now();
        req.validate()?;
        let mut cursor = self.cursor.lock().unwrap();
        let entry = self
            .entries
            .get(cursor.next)
            .ok_or(LlmError::TranscriptExhausted { consumed: cursor.next })?;
        cursor.next += 1;
        cursor.log.push(ReplayRecord {
            tag: entry.tag.clone(),
            request: req.clone(),
            reply: entry.reply.clone(),
        });
        Ok(ChatResponse {
            content: entry.reply.clone(),
            usage: TokenUsage::default(),
            latency: started.elapsed().as_secs_f64(),
        })
    }
}

// ---------------------------------------------------------------------------
// Deterministic embedder

/// Feature-hashing bag-of-words embedder. Deterministic, offline, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embed_one(&self, text: &str) -> Embedding {
        let mut v = vec![0.0; self.dimension];
        let mut any = false;
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(token.to_lowercase().as_bytes());
            let idx = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
            any = true;
        }
        if !any {
            let h = fnv1a(text.as_bytes());
            v[(h % self.dimension as u64) as usize] = 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            // Signed collisions cancelled out completely.
            v[0] = 1.0;
        }
        Embedding(v)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, LlmError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
