//! Deterministic rule-based chat backend.
//!
//! It understands the three prompt families the agents send and answers
//! them with simple, reproducible rules. Fixture cassettes are recorded
//! against it so the whole pipeline can be replayed offline.
//!
//! Rules:
//! - Linking: picks the numbered candidate sharing the most mention word
//!   characters; ties go to the lower number.
//! - Summaries: lists the non-target endpoint of each relation with its
//!   predicate.
//! - Prediction: counts EHR attributes sharing a salient word with the
//!   supporting (`p`) and ruling-out (`n`) guidance. With supporting
//!   guidance alone the answer is YES when `p > 0`, or by chance; with
//!   ruling-out guidance it is YES when `p > n`. Without guidance the
//!   answer leans towards YES. A small share of first answers is
//!   deliberately unparseable.
//!
//! Chance decisions hash the stage's opening prompt, so a strict re-ask
//! gets the same decision as the unparseable answer it replaces.

use std::collections::BTreeSet;

use super::{Completion, CompletionBackend, CompletionRequest, GatewayError, Role, TokenUsage};
use crate::prompts::{EHR_PREFIX, NEGATIVE_GUIDANCE_PREFIX, POSITIVE_GUIDANCE_PREFIX, STRICT_VERDICT_REASK};

const LINKAGE_PREFIX: &str = "Disease mention: ";
const RETRIEVAL_PREFIX: &str = "Knowledge graph relations involving \"";
const STEP_PREFIX: &str = "Reason step by step";

const STOPWORDS: &[&str] = &[
    "other", "without", "unspecified", "disease", "diseases", "disorder", "disorders", "mention",
    "specified", "acute", "chronic", "stated", "factors", "include", "relations", "service",
];

#[derive(Debug, Clone, Default)]
pub struct SimulatedBackend {
    /// Percent of first prediction answers that contain no verdict.
    pub unparseable_percent: u64,
}

impl SimulatedBackend {
    pub fn new() -> Self {
        Self {
            unparseable_percent: 3,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn percentile(key: &str, salt: &str) -> u64 {
    fnv1a(format!("{salt}\u{0}{key}").as_bytes()) % 100
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn salient(s: &str) -> BTreeSet<String> {
    words(s)
        .filter(|w| w.chars().count() >= 5 && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

fn estimate_tokens(s: &str) -> u64 {
    (s.chars().count() as u64).div_ceil(4)
}

/// Text of the guidance block starting with `prefix`, after its `<disease>: ` lead-in.
fn guidance<'a>(message: &'a str, prefix: &str) -> Option<&'a str> {
    let start = message.find(prefix)? + prefix.len();
    let rest = &message[start..];
    let rest = rest.split("\n\n").next().unwrap_or(rest);
    Some(rest.split_once(": ").map_or(rest, |(_, k)| k))
}

fn attributes(first_user: &str) -> Vec<String> {
    let line = first_user.lines().next().unwrap_or("");
    let body = line.strip_prefix(EHR_PREFIX).unwrap_or(line);
    let body = body.strip_suffix('.').unwrap_or(body);
    body.split("; ").map(str::to_string).collect()
}

fn hits<'a>(attrs: &'a [String], knowledge: Option<&str>) -> Vec<&'a str> {
    let Some(k) = knowledge else {
        return Vec::new();
    };
    let known = salient(k);
    attrs
        .iter()
        .filter(|a| salient(a).iter().any(|w| known.contains(w)))
        .map(String::as_str)
        .collect()
}

impl SimulatedBackend {
    fn link(&self, prompt: &str) -> String {
        let mention = prompt
            .lines()
            .next()
            .and_then(|l| l.strip_prefix(LINKAGE_PREFIX))
            .unwrap_or("");
        let mention_words: BTreeSet<String> = words(mention).collect();
        let mut best = (0usize, 1usize);
        for line in prompt.lines() {
            let Some((num, name)) = line.split_once(". ") else {
                continue;
            };
            let Ok(num) = num.parse::<usize>() else {
                continue;
            };
            let overlap: usize = words(name)
                .collect::<BTreeSet<_>>()
                .intersection(&mention_words)
                .map(|w| w.chars().count())
                .sum();
            if overlap > best.0 {
                best = (overlap, num);
            }
        }
        best.1.to_string()
    }

    fn summarize(&self, prompt: &str) -> String {
        let entity = prompt
            .lines()
            .next()
            .and_then(|l| l.strip_prefix(RETRIEVAL_PREFIX))
            .and_then(|l| l.strip_suffix("\":"))
            .unwrap_or("");
        let items: Vec<String> = prompt
            .lines()
            .filter_map(|l| l.strip_prefix('(')?.strip_suffix(')'))
            .filter_map(|l| {
                let mut parts = l.splitn(3, ", ");
                let (h, p, t) = (parts.next()?, parts.next()?, parts.next()?);
                let other = if h == entity { t } else { h };
                Some(format!("{other} ({})", p.to_lowercase()))
            })
            .collect();
        format!("Relevant factors: {}.", items.join("; "))
    }

    fn predict(&self, req: &CompletionRequest) -> String {
        let users: Vec<&str> = req
            .messages
            .iter()
            .filter(|m| m.role == Role::User && m.content != STRICT_VERDICT_REASK)
            .map(|m| m.content.as_str())
            .collect();
        let reasked = req.messages.last().is_some_and(|m| m.content == STRICT_VERDICT_REASK);
        let first = users[0];
        let stage = users.len();
        let current = users[stage - 1];
        let attrs = attributes(first);

        let pos = hits(&attrs, guidance(first, POSITIVE_GUIDANCE_PREFIX));
        let neg_source = if stage == 1 { first } else { current };
        let neg = hits(&attrs, guidance(neg_source, NEGATIVE_GUIDANCE_PREFIX));
        let chance = |salt: &str| percentile(first, salt);

        let has_pos = first.contains(POSITIVE_GUIDANCE_PREFIX);
        let has_neg = neg_source.contains(NEGATIVE_GUIDANCE_PREFIX);
        let yes = match (stage, has_pos, has_neg) {
            // Both guidance blocks in one prompt.
            (1, true, true) => {
                if pos.len() > neg.len() {
                    true
                } else if neg.len() > pos.len() {
                    chance("mixed") < 45
                } else {
                    chance("mixed") < 60
                }
            }
            (1, true, false) => !pos.is_empty() || chance("stage1") < 55,
            (_, _, true) => pos.len() > neg.len() || (pos.len() == neg.len() && chance("tie") < 30),
            (1, false, false) if first.contains(STEP_PREFIX) => chance("steps") >= 20,
            (1, false, false) => chance("direct") >= 12,
            // Self-reflection without knowledge: the stage I call is kept
            // unless a chance re-think flips it to NO.
            _ => chance("direct") >= 12 && chance("reflect") >= 35,
        };

        if !reasked && percentile(&req.fingerprint(), "garble") < self.unparseable_percent {
            return "The evidence in this record is mixed and a firm call is difficult.".into();
        }
        if reasked {
            return if yes { "YES" } else { "NO" }.into();
        }

        let verdict = if yes { "YES" } else { "NO" };
        let mut reasoning = Vec::new();
        if !pos.is_empty() {
            reasoning.push(format!("Supporting findings: {}.", pos.join(", ")));
        }
        if !neg.is_empty() {
            reasoning.push(format!("Findings that do not support the diagnosis: {}.", neg.join(", ")));
        }
        if reasoning.is_empty() {
            reasoning.push(format!("Judged from {} recorded attributes.", attrs.len()));
        }
        if stage > 1 {
            reasoning.push("Prediction re-checked.".into());
        }
        format!("{verdict}\nReasoning: {}", reasoning.join(" "))
    }
}

impl CompletionBackend for SimulatedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        let first_user = req
            .messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .ok_or_else(|| GatewayError::Backend("no user message".into()))?;
        let text = if first_user.starts_with(LINKAGE_PREFIX) {
            self.link(first_user)
        } else if first_user.starts_with(RETRIEVAL_PREFIX) {
            self.summarize(first_user)
        } else if first_user.starts_with(EHR_PREFIX) {
            self.predict(req)
        } else {
            return Err(GatewayError::Backend("unrecognized prompt".into()));
        };
        let prompt_tokens: u64 = req.messages.iter().map(|m| estimate_tokens(&m.content) + 4).sum();
        let completion_tokens = estimate_tokens(&text);
        Ok(Completion {
            latency_ms: 150 + 12 * completion_tokens + prompt_tokens / 20,
            usage: TokenUsage::new(prompt_tokens, completion_tokens),
            text,
        })
    }
}
