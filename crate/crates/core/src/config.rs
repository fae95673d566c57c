//! Pipeline configuration loaded from one TOML file.
//!
//! Relative paths are resolved against the directory holding the config
//! file. The API key may come from the file, but `OPENAI_API_KEY` wins, and
//! the key is never serialized.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{DEFAULT_CANDIDATE_COUNT, DEFAULT_DIMENSION};
use crate::kg_store::DEFAULT_NEIGHBORHOOD_CAP;
use crate::llm_gateway::{ChatSettings, GatewayMode};
use crate::prediction::Verdict;

pub const API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const BASE_URL_ENV: &str = "OPENAI_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: path {path} does not exist")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KgConfig {
    pub entities: PathBuf,
    pub triples: PathBuf,
    /// Polarity lexicon; the built-in markers are used when absent.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default = "default_cap")]
    pub neighborhood_cap: usize,
    #[serde(default)]
    pub categories: Option<Vec<String>>,
    #[serde(default)]
    pub skip_malformed: bool,
    #[serde(default)]
    pub memory_budget_bytes: Option<u64>,
}

fn default_cap() -> usize {
    DEFAULT_NEIGHBORHOOD_CAP
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProviderKind {
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    #[serde(default = "default_provider")]
    pub provider: EmbeddingProviderKind,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default = "default_candidates")]
    pub candidate_count: usize,
    /// Seed offset for the hash provider, added to the top-level seed.
    #[serde(default)]
    pub seed_offset: u64,
    /// Embeddings endpoint and model for the HTTP provider.
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
}

fn default_provider() -> EmbeddingProviderKind {
    EmbeddingProviderKind::Hash
}
fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}
fn default_candidates() -> usize {
    DEFAULT_CANDIDATE_COUNT
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: default_provider(),
            dimension: default_dimension(),
            candidate_count: default_candidates(),
            seed_offset: 0,
            url: None,
            model: None,
        }
    }
}

/// Where live and record traffic goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatBackendKind {
    /// OpenAI-compatible `/chat/completions` endpoint.
    Http,
    /// The offline rule-based backend.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(default = "default_backend")]
    pub backend: ChatBackendKind,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_mode")]
    pub mode: GatewayMode,
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    pub pricing: PathBuf,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_fallback")]
    pub fallback_verdict: Verdict,
}

fn default_backend() -> ChatBackendKind {
    ChatBackendKind::Http
}
fn default_model() -> String {
    ChatSettings::default().model
}
fn default_max_tokens() -> u32 {
    ChatSettings::default().max_tokens
}
fn default_mode() -> GatewayMode {
    GatewayMode::Replay
}
fn default_rpm() -> u32 {
    500
}
fn default_in_flight() -> usize {
    8
}
fn default_fallback() -> Verdict {
    Verdict::Yes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Directory for cached knowledge bundles; in-memory only when absent.
    #[serde(default)]
    pub bundle_cache: Option<PathBuf>,
    pub kg: KgConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    pub llm: LlmConfig,
}

fn default_parallelism() -> usize {
    4
}
fn default_runs() -> usize {
    5
}

impl PipelineConfig {
    /// Parses, resolves relative paths and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and resolves relative paths; call [`PipelineConfig::validate`]
    /// after applying any overrides.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::from_toml_str(&raw, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Parses and resolves paths against `base` without validating.
    pub fn from_toml_str(raw: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(raw).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.kg.entities);
        fix(&mut self.kg.triples);
        if let Some(p) = self.kg.lexicon.as_mut() {
            fix(p);
        }
        fix(&mut self.llm.pricing);
        if let Some(p) = self.llm.cassette.as_mut() {
            fix(p);
        }
        if let Some(p) = self.bundle_cache.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let must_exist = |field, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ConfigError::MissingPath {
                    field,
                    path: p.to_path_buf(),
                })
            }
        };
        must_exist("kg.entities", &self.kg.entities)?;
        must_exist("kg.triples", &self.kg.triples)?;
        if let Some(p) = &self.kg.lexicon {
            must_exist("kg.lexicon", p)?;
        }
        must_exist("llm.pricing", &self.llm.pricing)?;
        match (self.llm.mode, &self.llm.cassette) {
            (GatewayMode::Replay, None) => {
                return Err(ConfigError::Invalid("replay mode needs llm.cassette".into()))
            }
            (GatewayMode::Replay, Some(p)) => must_exist("llm.cassette", p)?,
            _ => {}
        }
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.embedding.candidate_count == 0 {
            return invalid("embedding.candidate_count must be at least 1");
        }
        if self.embedding.dimension == 0 {
            return invalid("embedding.dimension must be at least 1");
        }
        if self.embedding.provider == EmbeddingProviderKind::Http
            && (self.embedding.url.is_none() || self.embedding.model.is_none())
        {
            return invalid("the http embedding provider needs embedding.url and embedding.model");
        }
        if self.parallelism == 0 {
            return invalid("parallelism must be at least 1");
        }
        if self.runs == 0 {
            return invalid("runs must be at least 1");
        }
        if self.kg.neighborhood_cap == 0 {
            return invalid("kg.neighborhood_cap must be at least 1");
        }
        if !self.llm.temperature.is_finite() || self.llm.temperature < 0.0 {
            return invalid("llm.temperature must be a finite value >= 0");
        }
        if self.llm.max_tokens == 0 || self.llm.requests_per_minute == 0 || self.llm.max_in_flight == 0 {
            return invalid("llm.max_tokens, llm.requests_per_minute and llm.max_in_flight must be positive");
        }
        Ok(())
    }

    pub fn chat(&self) -> ChatSettings {
        ChatSettings {
            model: self.llm.model.clone(),
            temperature: self.llm.temperature,
            max_tokens: self.llm.max_tokens,
        }
    }

    /// `OPENAI_API_KEY` if set, else the key from the file.
    pub fn api_key(&self) -> Option<String> {
        std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .or_else(|| self.llm.api_key.clone())
    }

    pub fn base_url(&self) -> String {
        std::env::var(BASE_URL_ENV)
            .ok()
            .filter(|u| !u.is_empty())
            .or_else(|| self.llm.base_url.clone())
            .unwrap_or_else(|| DEFAULT_BASE_URL.to_string())
    }

    /// TOML echo of the effective config. The API key is left out.
    pub fn redacted_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
