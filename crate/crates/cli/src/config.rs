//! Operator configuration: an optional TOML file plus environment variables.
//!
//! Lookup order for the file: `--config <path>`, `./nsagent.toml`, then
//! `$HOME/.nsagent.toml`. API keys are read from the environment only.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use nsagent_core::agents::AgentSettings;
use nsagent_core::llm_gateway::{ProviderConfig, Secret};
use nsagent_core::orchestrator::PipelineConfig;
use nsagent_core::toolchain::{PayloadKind, ToolchainConfig};

pub const FILE_NAME: &str = "nsagent.toml";
pub const HOME_FILE_NAME: &str = ".nsagent.toml";
pub const ENV_API_KEY: &str = "NSAGENT_API_KEY";
pub const ENV_API_KEY_FALLBACK: &str = "OPENAI_API_KEY";
pub const ENV_BASE_URL: &str = "NSAGENT_BASE_URL";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Human,
    Json,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Offline feature hashing. Stores built with it work without a provider.
    #[default]
    Hash,
    Provider,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub base_url: Option<String>,
    pub default_model: Option<String>,
    pub embedding_model: Option<String>,
    pub max_retries: Option<u32>,
    pub retry_backoff: Option<f64>,
    pub request_timeout: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub kind: EmbedderKind,
    /// Only used by the hash embedder when no store fixes the dimension.
    pub dimension: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self { kind: EmbedderKind::Hash, dimension: 384 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub max_iterations: Option<u32>,
    pub retrieval_k: Option<usize>,
    pub temperature: Option<f64>,
    pub payload_kind: Option<PayloadKind>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub bind: Option<String>,
    pub max_sessions: Option<usize>,
    pub max_workers: Option<usize>,
    pub cors_origins: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Knowledge store index file.
    pub store: Option<PathBuf>,
    /// Where sessions are persisted.
    pub state_dir: Option<PathBuf>,
    pub output: Option<OutputFormat>,
    /// Directory of prompt template overrides.
    pub prompts_dir: Option<PathBuf>,
    pub provider: ProviderSection,
    pub embedding: EmbeddingSection,
    pub toolchain: Option<ToolchainConfig>,
    pub pipeline: PipelineSection,
    pub service: ServiceSection,
    /// File the config was read from, if any.
    #[serde(skip)]
    pub source: Option<PathBuf>,
}

impl CliConfig {
    pub fn parse(text: &str, source: &Path) -> Result<Self, String> {
        let mut cfg: CliConfig = toml::from_str(text).map_err(|e| format!("{}: {e}", source.display()))?;
        let base = source.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.store, &mut cfg.state_dir, &mut cfg.prompts_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.source = Some(source.to_path_buf());
        Ok(cfg)
    }

    /// Reads `explicit`, or the first config found in `cwd` then `home`.
    pub fn discover(explicit: Option<&Path>, cwd: &Path, home: Option<&Path>) -> Result<Self, String> {
        let path = match explicit {
            Some(p) if !p.is_file() => return Err(format!("config file {} does not exist", p.display())),
            Some(p) => Some(p.to_path_buf()),
            None => std::iter::once(cwd.join(FILE_NAME))
                .chain(home.map(|h| h.join(HOME_FILE_NAME)))
                .find(|p| p.is_file()),
        };
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
                Self::parse(&text, &p)
            }
            None => Ok(Self::default()),
        }
    }

    /// Provider settings with the environment applied. `env` is injected for tests.
    pub fn provider(&self, env: impl Fn(&str) -> Option<String>) -> ProviderConfig {
        let mut p = ProviderConfig::default();
        let s = &self.provider;
        if let Some(v) = &s.base_url {
            p.base_url = v.clone();
        }
        if let Some(v) = &s.default_model {
            p.default_model = v.clone();
        }
        if let Some(v) = &s.embedding_model {
            p.embedding_model = v.clone();
        }
        if let Some(v) = s.max_retries {
            p.max_retries = v;
        }
        if let Some(v) = s.retry_backoff {
            p.retry_backoff = v;
        }
        if let Some(v) = s.request_timeout {
            p.request_timeout = v;
        }
        if let Some(v) = env(ENV_BASE_URL).filter(|v| !v.is_empty()) {
            p.base_url = v;
        }
        if let Some(k) = env(ENV_API_KEY).or_else(|| env(ENV_API_KEY_FALLBACK)).filter(|k| !k.is_empty()) {
            p.api_key = Secret::new(k);
        }
        p
    }

    pub fn toolchain(&self) -> ToolchainConfig {
        self.toolchain.clone().unwrap_or_default()
    }

    /// Session defaults; `model` falls back to the provider's default model.
    pub fn pipeline(&self, model: Option<&str>) -> PipelineConfig {
        let mut agent = AgentSettings::default();
        if let Some(m) = model.or(self.provider.default_model.as_deref()) {
            agent.model = m.to_string();
        }
        let s = &self.pipeline;
        if let Some(k) = s.retrieval_k {
            agent.retrieval_k = k;
        }
        if let Some(t) = s.temperature {
            agent.temperature = t;
        }
        if let Some(kind) = s.payload_kind {
            agent.payload_kind = kind;
        }
        let mut cfg = PipelineConfig { agent, ..Default::default() };
        if let Some(m) = s.max_iterations {
            cfg.max_iterations = m;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discovery_prefers_cwd_over_home() {
        let cwd = tempfile::tempdir().unwrap();
        let home = tempfile::tempdir().unwrap();
        std::fs::write(home.path().join(HOME_FILE_NAME), "store = \"home.idx\"\n").unwrap();
        let cfg = CliConfig::discover(None, cwd.path(), Some(home.path())).unwrap();
        assert_eq!(cfg.store, Some(home.path().join("home.idx")));

        std::fs::write(cwd.path().join(FILE_NAME), "store = \"here.idx\"\n").unwrap();
        let cfg = CliConfig::discover(None, cwd.path(), Some(home.path())).unwrap();
        assert_eq!(cfg.store, Some(cwd.path().join("here.idx")));

        let none = CliConfig::discover(None, home.path().join("nowhere").as_path(), None).unwrap();
        assert!(none.source.is_none());
        assert!(CliConfig::discover(Some(Path::new("/no/such/file.toml")), cwd.path(), None).is_err());
    }

    #[test]
    fn environment_overrides_file_and_key_is_never_read_from_file() {
        let cfg = CliConfig::parse("[provider]\nbase_url = \"http://file\"\ndefault_model = \"m1\"\n", Path::new("x.toml")).unwrap();
        let env = |k: &str| match k {
            ENV_BASE_URL => Some("http://env".to_string()),
            ENV_API_KEY_FALLBACK => Some("k-fallback".to_string()),
            _ => None,
        };
        let p = cfg.provider(env);
        assert_eq!(p.base_url, "http://env");
        assert_eq!(p.api_key.expose(), "k-fallback");
        assert_eq!(p.default_model, "m1");
        assert!(CliConfig::parse("[provider]\napi_key = \"x\"\n", Path::new("x.toml")).is_err());
    }

    #[test]
    fn model_precedence() {
        let cfg = CliConfig::parse("[provider]\ndefault_model = \"from-file\"\n", Path::new("x.toml")).unwrap();
        assert_eq!(cfg.pipeline(Some("flag")).agent.model, "flag");
        assert_eq!(cfg.pipeline(None).agent.model, "from-file");
        assert_eq!(CliConfig::default().pipeline(None).agent.model, AgentSettings::default().model);
    }
}
