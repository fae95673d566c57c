//! Chat-completion gateway shared by all agents.
//!
//! A [`Gateway`] runs in one of three modes:
//!
//! - `live`: every request goes to the configured backend.
//! - `replay`: requests are answered from a [`Cassette`]; the network is
//!   never touched and a missing fingerprint is an error.
//! - `record`: requests go to the backend and every response is written
//!   into the cassette.
//!
//! Live and record traffic passes through a requests-per-minute limiter and
//! an in-flight bound. Every answered request lands in the usage ledger,
//! which is what cost reports are computed from.

mod cassette;
mod http;
mod limiter;
mod metering;
pub mod simulated;

use std::path::PathBuf;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transport::TransportError;

pub use cassette::{Cassette, CassetteEntry};
pub use http::HttpChatBackend;
pub use limiter::RateLimiter;
pub use metering::{meter, CostReport, MeterError, ModelPrice, PricingTable};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("cassette miss for request fingerprint {fingerprint}")]
    CassetteMiss { fingerprint: String },
    #[error("cassette {path}: {message}")]
    Cassette { path: String, message: String },
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

/// SHA-256 over the canonical JSON of model, messages and temperature.
pub fn fingerprint(model: &str, messages: &[ChatMessage], temperature: f64) -> String {
    let canonical = serde_json::to_vec(&FingerprintInput {
        model,
        messages,
        temperature,
    })
    .expect("fingerprint input serializes");
    hex::encode(Sha256::digest(&canonical))
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if self.model.trim().is_empty() {
            return bad("model is empty");
        }
        let Some(first) = self.messages.first() else {
            return bad("no messages");
        };
        if first.role == Role::Assistant {
            return bad("conversation must start with a system or user message");
        }
        if self.messages.iter().any(|m| m.content.trim().is_empty()) {
            return bad("message content is empty");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a finite value >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.model, &self.messages, self.temperature)
    }
}

/// Model and sampling settings an agent uses for every call it makes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

impl ChatSettings {
    pub fn request(&self, messages: Vec<ChatMessage>) -> CompletionRequest {
        CompletionRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
            total_tokens: prompt_tokens + completion_tokens,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.total_tokens == self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage::new(
            self.prompt_tokens + rhs.prompt_tokens,
            self.completion_tokens + rhs.completion_tokens,
        )
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::default(), |a, b| a + b)
    }
}

impl<'a> std::iter::Sum<&'a TokenUsage> for TokenUsage {
    fn sum<I: Iterator<Item = &'a TokenUsage>>(iter: I) -> Self {
        iter.copied().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
    /// Backend round-trip time; in replay this is the recorded value.
    pub latency_ms: u64,
}

/// Anything that can answer a chat-completion request.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Replay,
    Record,
}

impl std::str::FromStr for GatewayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "replay" => Ok(Self::Replay),
            "record" => Ok(Self::Record),
            other => Err(format!("unknown gateway mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub fingerprint: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
}

pub struct Gateway {
    mode: GatewayMode,
    backend: Option<Box<dyn CompletionBackend>>,
    cassette: RwLock<Cassette>,
    cassette_path: Option<PathBuf>,
    limiter: RateLimiter,
    ledger: Mutex<Vec<LedgerEntry>>,
}

impl Gateway {
    pub fn live(backend: Box<dyn CompletionBackend>, limiter: RateLimiter) -> Self {
        Self::with_parts(GatewayMode::Live, Some(backend), Cassette::default(), None, limiter)
    }

    pub fn replay(cassette: Cassette) -> Self {
        Self::with_parts(GatewayMode::Replay, None, cassette, None, RateLimiter::unlimited())
    }

    /// Records into `cassette`; [`Gateway::persist`] writes it to `path`.
    pub fn record(
        backend: Box<dyn CompletionBackend>,
        cassette: Cassette,
        path: Option<PathBuf>,
        limiter: RateLimiter,
    ) -> Self {
        Self::with_parts(GatewayMode::Record, Some(backend), cassette, path, limiter)
    }

    fn with_parts(
        mode: GatewayMode,
        backend: Option<Box<dyn CompletionBackend>>,
        cassette: Cassette,
        cassette_path: Option<PathBuf>,
        limiter: RateLimiter,
    ) -> Self {
        Self {
            mode,
            backend,
            cassette: RwLock::new(cassette),
            cassette_path,
            limiter,
            ledger: Mutex::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        req.validate()?;
        let fp = req.fingerprint();
        let completion = match self.mode {
            GatewayMode::Replay => {
                let cassette = self.cassette.read().expect("cassette lock");
                let entry = cassette
                    .get(&fp)
                    .ok_or_else(|| GatewayError::CassetteMiss {
                        fingerprint: fp.clone(),
                    })?;
                Completion {
                    text: entry.response.clone(),
                    usage: entry.usage,
                    latency_ms: entry.latency_ms,
                }
            }
            GatewayMode::Live | GatewayMode::Record => {
                let backend = self
                    .backend
                    .as_ref()
                    .ok_or_else(|| GatewayError::Backend("no backend configured".into()))?;
                let completion = {
                    let _permit = self.limiter.acquire();
                    backend.complete(req)?
                };
                if self.mode == GatewayMode::Record {
                    self.cassette
                        .write()
                        .expect("cassette lock")
                        .insert(CassetteEntry::new(req, &completion));
                }
                completion
            }
        };
        self.ledger.lock().expect("ledger lock").push(LedgerEntry {
            fingerprint: fp,
            usage: completion.usage,
            latency_ms: completion.latency_ms,
        });
        Ok(completion)
    }

    /// Number of ledger entries so far; use with [`Gateway::ledger_since`].
    pub fn ledger_mark(&self) -> usize {
        self.ledger.lock().expect("ledger lock").len()
    }

    pub fn ledger_since(&self, mark: usize) -> Vec<LedgerEntry> {
        self.ledger.lock().expect("ledger lock")[mark..].to_vec()
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.ledger_since(0)
    }

    pub fn cassette_snapshot(&self) -> Cassette {
        self.cassette.read().expect("cassette lock").clone()
    }

    /// Writes the recorded cassette when recording to a path. No-op otherwise.
    pub fn persist(&self) -> Result<(), GatewayError> {
        if let (GatewayMode::Record, Some(path)) = (self.mode, &self.cassette_path) {
            self.cassette.read().expect("cassette lock").save(path)?;
        }
        Ok(())
    }
}
