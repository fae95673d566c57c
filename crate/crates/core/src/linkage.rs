//! Linkage agent: maps an EHR disease mention to one knowledge-graph entity.
//!
//! Candidates come from the embedding index; the LLM picks one of them by
//! number. An unusable answer gets one stricter re-ask, after which the
//! top-ranked candidate is taken and the result is flagged as a fallback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingIndex, EmbeddingProvider, LinkCandidate, LinkerConfig};
use crate::kg_store::KgStore;
use crate::llm_gateway::{ChatMessage, ChatSettings, Gateway, GatewayError, TokenUsage};
use crate::prompts::{self, text};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("mention is empty")]
    EmptyMention,
    #[error("no linking candidates")]
    NoCandidates,
    #[error("candidates are not sorted by descending score")]
    UnsortedCandidates,
    #[error("candidate entity `{0}` is not in the knowledge graph")]
    UnknownEntity(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRequest {
    pub mention: String,
    pub candidates: Vec<LinkCandidate>,
}

impl LinkRequest {
    pub fn validate(&self) -> Result<(), LinkError> {
        if self.mention.trim().is_empty() {
            return Err(LinkError::EmptyMention);
        }
        if self.candidates.is_empty() {
            return Err(LinkError::NoCandidates);
        }
        if self.candidates.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(LinkError::UnsortedCandidates);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub mention: String,
    pub chosen: String,
    pub chosen_name: String,
    /// 1-based position of `chosen` in `candidates`.
    pub rank_of_chosen: usize,
    pub candidates: Vec<LinkCandidate>,
    pub transcript: Vec<ChatMessage>,
    pub usage: TokenUsage,
    pub fallback: bool,
}

/// Generates candidates for `mention` and disambiguates among them.
pub fn link(
    gateway: &Gateway,
    store: &KgStore,
    index: &EmbeddingIndex,
    provider: &dyn EmbeddingProvider,
    mention: &str,
    linker: &LinkerConfig,
    chat: &ChatSettings,
) -> Result<LinkResult, LinkError> {
    if mention.trim().is_empty() {
        return Err(LinkError::EmptyMention);
    }
    let candidates = index.top_candidates(provider, mention, linker)?;
    disambiguate(
        gateway,
        store,
        &LinkRequest {
            mention: mention.to_string(),
            candidates,
        },
        chat,
    )
}

/// Asks the LLM to choose among already generated candidates.
pub fn disambiguate(
    gateway: &Gateway,
    store: &KgStore,
    req: &LinkRequest,
    chat: &ChatSettings,
) -> Result<LinkResult, LinkError> {
    req.validate()?;
    let names = req
        .candidates
        .iter()
        .map(|c| {
            store
                .entity(&c.entity)
                .map(|e| e.name.clone())
                .ok_or_else(|| LinkError::UnknownEntity(c.entity.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let finish = |pos: usize, transcript, usage, fallback| LinkResult {
        mention: req.mention.clone(),
        chosen: req.candidates[pos].entity.clone(),
        chosen_name: names[pos].clone(),
        rank_of_chosen: pos + 1,
        candidates: req.candidates.clone(),
        transcript,
        usage,
        fallback,
    };

    if req.candidates.len() == 1 {
        return Ok(finish(0, Vec::new(), TokenUsage::default(), false));
    }

    let listing = names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{}. {n}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let mut messages = vec![
        ChatMessage::system(text::linkage_system()),
        ChatMessage::user(prompts::render(
            text::linkage_user(),
            &[("mention", &req.mention), ("candidates", &listing)],
        )),
    ];
    let mut usage = TokenUsage::default();

    let first = gateway.complete(&chat.request(messages.clone()))?;
    usage += first.usage;
    messages.push(ChatMessage::assistant(first.text.clone()));
    if let Some(pos) = parse_selection(&first.text, &names) {
        return Ok(finish(pos, messages, usage, false));
    }

    let count = names.len().to_string();
    messages.push(ChatMessage::user(prompts::render(
        text::linkage_retry(),
        &[("count", &count)],
    )));
    let second = gateway.complete(&chat.request(messages.clone()))?;
    usage += second.usage;
    messages.push(ChatMessage::assistant(second.text.clone()));
    match parse_selection(&second.text, &names) {
        Some(pos) => Ok(finish(pos, messages, usage, false)),
        None => {
            tracing::warn!(mention = %req.mention, "linkage answer unusable twice; taking top candidate");
            Ok(finish(0, messages, usage, true))
        }
    }
}

/// Reads the chosen candidate (0-based) out of an answer.
///
/// Accepts a bare 1-based index, an index wrapped in punctuation (`2.`,
/// `(2)`, `#2`), or a candidate name matched case-insensitively in full.
pub fn parse_selection<S: AsRef<str>>(answer: &str, names: &[S]) -> Option<usize> {
    let trimmed = answer.trim();
    let digits = trimmed.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    if !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) {
        return digits
            .parse::<usize>()
            .ok()
            .filter(|n| (1..=names.len()).contains(n))
            .map(|n| n - 1);
    }
    let lower = trimmed.to_lowercase();
    names.iter().position(|n| n.as_ref().to_lowercase() == lower)
}
