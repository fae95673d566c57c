//! Prediction agent and the baseline prompting strategies.
//!
//! `Kerap` runs two stages in one conversation. Stage I sees the visit and
//! the supporting knowledge; Stage II replays Stage I verbatim, adds the
//! fixed caution instruction and the ruling-out knowledge, and its verdict
//! is final. `Iterative` has the same shape with self-reflection prompts in
//! place of knowledge. The other strategies are single-stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_gateway::{ChatMessage, ChatSettings, Gateway, GatewayError, Role, TokenUsage};
use crate::prompts::{self, text, INSTRUCTION_PREFIX, STAGE2_INSTRUCTION, STRICT_VERDICT_REASK};
use crate::retrieval::KnowledgeBundle;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("strategy {0} needs a knowledge bundle")]
    MissingKnowledge(Strategy),
    #[error("visit `{0}` has no attributes")]
    EmptyVisit(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientVisit {
    pub visit_id: String,
    pub attributes: Vec<String>,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "YES")]
    Yes,
    #[serde(rename = "NO")]
    No,
}

impl Verdict {
    pub fn as_bool(self) -> bool {
        self == Verdict::Yes
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Yes => "YES",
            Verdict::No => "NO",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no standalone YES or NO in response")]
pub struct UnparseableVerdict;

/// Finds the verdict in a free-text answer.
///
/// Words are maximal runs of alphanumerics and `_`. The first line is
/// searched first, then the whole text; within the searched span the first
/// `yes` or `no` word (any case) wins.
pub fn parse_verdict(response: &str) -> Result<Verdict, UnparseableVerdict> {
    let first_line = response.lines().next().unwrap_or("");
    first_verdict_word(first_line)
        .or_else(|| first_verdict_word(response))
        .ok_or(UnparseableVerdict)
}

fn first_verdict_word(s: &str) -> Option<Verdict> {
    s.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .find_map(|w| {
            if w.eq_ignore_ascii_case("yes") {
                Some(Verdict::Yes)
            } else if w.eq_ignore_ascii_case("no") {
                Some(Verdict::No)
            } else {
                None
            }
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Direct,
    StepByStep,
    KgAugmented,
    Iterative,
    Kerap,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Direct,
        Strategy::StepByStep,
        Strategy::KgAugmented,
        Strategy::Iterative,
        Strategy::Kerap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::StepByStep => "step-by-step",
            Strategy::KgAugmented => "kg-augmented",
            Strategy::Iterative => "iterative",
            Strategy::Kerap => "kerap",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::Direct => "Direct Prompting",
            Strategy::StepByStep => "Step-by-Step Prompting",
            Strategy::KgAugmented => "KG-Augmented Prompting",
            Strategy::Iterative => "Iterative Prompting",
            Strategy::Kerap => "KERAP",
        }
    }

    pub fn uses_knowledge(self) -> bool {
        matches!(self, Strategy::KgAugmented | Strategy::Kerap)
    }

    pub fn is_two_stage(self) -> bool {
        matches!(self, Strategy::Iterative | Strategy::Kerap)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// One stage of a prediction conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Messages of the stage's first request, system prompt included.
    pub messages: Vec<ChatMessage>,
    /// The response the verdict was read from.
    pub response: String,
    /// The unparseable first response, when a strict re-ask was needed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_response: Option<String>,
    pub verdict: Verdict,
    /// True when neither response parsed and the configured default was used.
    pub fallback: bool,
}

impl StageRecord {
    /// Non-system message contents of the stage request, joined by blank lines.
    pub fn prompt(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role != Role::System)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub visit_id: String,
    pub disease: String,
    pub strategy: Strategy,
    pub stage1: StageRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<StageRecord>,
    #[serde(rename = "final")]
    pub final_verdict: Verdict,
    pub usage: TokenUsage,
    pub parse_fallbacks: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub chat: ChatSettings,
    /// Verdict used when a stage's answer cannot be parsed even after re-asking.
    pub fallback_verdict: Verdict,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            chat: ChatSettings::default(),
            fallback_verdict: Verdict::Yes,
        }
    }
}

fn guidance_positive(disease: &str, bundle: &KnowledgeBundle) -> String {
    prompts::render(
        text::guidance_positive(),
        &[("disease", disease), ("knowledge", &bundle.positive_summary)],
    )
}

fn guidance_negative(disease: &str, bundle: &KnowledgeBundle) -> String {
    prompts::render(
        text::guidance_negative(),
        &[("disease", disease), ("knowledge", &bundle.negative_summary)],
    )
}

/// First-stage user prompt for `strategy`.
pub fn stage1_prompt(
    strategy: Strategy,
    visit: &PatientVisit,
    disease: &str,
    bundle: Option<&KnowledgeBundle>,
) -> Result<String, PredictionError> {
    let attributes = prompts::render_attributes(&visit.attributes);
    let mut parts = vec![prompts::render(
        text::ehr_question(),
        &[("attributes", &attributes), ("disease", disease)],
    )];
    let need = || bundle.ok_or(PredictionError::MissingKnowledge(strategy));
    match strategy {
        Strategy::Direct => {}
        Strategy::StepByStep => parts.push(text::step_by_step().to_string()),
        Strategy::KgAugmented => {
            let b = need()?;
            parts.push(guidance_positive(disease, b));
            parts.push(guidance_negative(disease, b));
        }
        Strategy::Iterative => parts.push(text::reflection_stage1().to_string()),
        Strategy::Kerap => parts.push(guidance_positive(disease, need()?)),
    }
    parts.push(text::answer_format().to_string());
    Ok(parts.join("\n\n"))
}

/// Second-stage user prompt, or `None` for single-stage strategies.
pub fn stage2_prompt(
    strategy: Strategy,
    disease: &str,
    bundle: Option<&KnowledgeBundle>,
) -> Result<Option<String>, PredictionError> {
    let middle = match strategy {
        Strategy::Kerap => guidance_negative(
            disease,
            bundle.ok_or(PredictionError::MissingKnowledge(strategy))?,
        ),
        Strategy::Iterative => text::reflection_stage2().to_string(),
        _ => return Ok(None),
    };
    let instruction = format!("{INSTRUCTION_PREFIX}{STAGE2_INSTRUCTION}");
    Ok(Some(
        [instruction.as_str(), &middle, text::answer_format()].join("\n\n"),
    ))
}

struct StageRun {
    record: StageRecord,
    /// Conversation after the stage, ready to carry into the next one.
    conversation: Vec<ChatMessage>,
    usage: TokenUsage,
}

fn run_stage(
    gateway: &Gateway,
    cfg: &PredictionConfig,
    messages: Vec<ChatMessage>,
) -> Result<StageRun, PredictionError> {
    let mut conversation = messages.clone();
    let first = gateway.complete(&cfg.chat.request(messages.clone()))?;
    let mut usage = first.usage;
    conversation.push(ChatMessage::assistant(first.text.clone()));
    if let Ok(verdict) = parse_verdict(&first.text) {
        return Ok(StageRun {
            record: StageRecord {
                messages,
                response: first.text,
                first_response: None,
                verdict,
                fallback: false,
            },
            conversation,
            usage,
        });
    }

    conversation.push(ChatMessage::user(STRICT_VERDICT_REASK));
    let second = gateway.complete(&cfg.chat.request(conversation.clone()))?;
    usage += second.usage;
    conversation.push(ChatMessage::assistant(second.text.clone()));
    let (verdict, fallback) = match parse_verdict(&second.text) {
        Ok(v) => (v, false),
        Err(_) => (cfg.fallback_verdict, true),
    };
    Ok(StageRun {
        record: StageRecord {
            messages,
            response: second.text,
            first_response: Some(first.text),
            verdict,
            fallback,
        },
        conversation,
        usage,
    })
}

pub fn predict(
    gateway: &Gateway,
    visit: &PatientVisit,
    disease: &str,
    bundle: Option<&KnowledgeBundle>,
    strategy: Strategy,
    cfg: &PredictionConfig,
) -> Result<PredictionOutcome, PredictionError> {
    if visit.attributes.is_empty() {
        return Err(PredictionError::EmptyVisit(visit.visit_id.clone()));
    }
    let user1 = stage1_prompt(strategy, visit, disease, bundle)?;
    let user2 = stage2_prompt(strategy, disease, bundle)?;

    let s1 = run_stage(
        gateway,
        cfg,
        vec![ChatMessage::system(text::prediction_system()), ChatMessage::user(user1)],
    )?;
    let mut usage = s1.usage;
    let mut parse_fallbacks = u32::from(s1.record.fallback);

    let stage2 = match user2 {
        Some(user2) => {
            let mut messages = s1.conversation;
            messages.push(ChatMessage::user(user2));
            let s2 = run_stage(gateway, cfg, messages)?;
            usage += s2.usage;
            parse_fallbacks += u32::from(s2.record.fallback);
            Some(s2.record)
        }
        None => None,
    };
    let final_verdict = stage2.as_ref().map_or(s1.record.verdict, |s| s.verdict);
    if parse_fallbacks > 0 {
        tracing::warn!(visit = %visit.visit_id, %strategy, parse_fallbacks, "verdict parse fell back to default");
    }
    Ok(PredictionOutcome {
        visit_id: visit.visit_id.clone(),
        disease: disease.to_string(),
        strategy,
        stage1: s1.record,
        stage2,
        final_verdict,
        usage,
        parse_fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::SourceCounts;

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("YES"), Ok(Verdict::Yes));
        assert_eq!(parse_verdict("Prediction: NO. Reasoning: ..."), Ok(Verdict::No));
        assert_eq!(parse_verdict("The risk is uncertain."), Err(UnparseableVerdict));
        assert_eq!(parse_verdict("no, not yes"), Ok(Verdict::No));
        assert_eq!(parse_verdict("Reasoning first\nFinal: yes"), Ok(Verdict::Yes));
        assert_eq!(parse_verdict("nothing notable\nyesterday no"), Ok(Verdict::No));
        assert_eq!(parse_verdict("Nope. Yesss"), Err(UnparseableVerdict));
        assert_eq!(parse_verdict(""), Err(UnparseableVerdict));
    }

    #[test]
    fn first_line_takes_priority() {
        assert_eq!(parse_verdict("Answer: NO\nEarlier I said yes"), Ok(Verdict::No));
        assert_eq!(parse_verdict("Summary\nyes then no"), Ok(Verdict::Yes));
    }

    #[test]
    fn verdict_round_trip() {
        for v in [Verdict::Yes, Verdict::No] {
            assert_eq!(parse_verdict(&v.to_string()), Ok(v));
        }
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("cot".parse::<Strategy>().is_err());
    }

    fn bundle() -> KnowledgeBundle {
        KnowledgeBundle {
            disease: "D".into(),
            entity: "E".into(),
            entity_name: "E".into(),
            positive_summary: "POSITIVE-KNOWLEDGE".into(),
            negative_summary: "NEGATIVE-KNOWLEDGE".into(),
            source_counts: SourceCounts::default(),
            positive_prompt: None,
            negative_prompt: None,
            usage: TokenUsage::default(),
            template_version: "v1".into(),
        }
    }

    fn visit() -> PatientVisit {
        PatientVisit {
            visit_id: "v1".into(),
            attributes: vec!["docusate".into(), "nimodipine".into()],
            label: None,
        }
    }

    #[test]
    fn knowledge_placement() {
        let b = bundle();
        for s in Strategy::ALL {
            let p1 = stage1_prompt(s, &visit(), "D", Some(&b)).unwrap();
            assert!(p1.starts_with("EHR Data: docusate; nimodipine."));
            assert!(!p1.contains("NEGATIVE-KNOWLEDGE") || s == Strategy::KgAugmented, "{s}");
            assert_eq!(p1.contains("POSITIVE-KNOWLEDGE"), s.uses_knowledge(), "{s}");
            let p2 = stage2_prompt(s, "D", Some(&b)).unwrap();
            assert_eq!(p2.is_some(), s.is_two_stage());
            if let Some(p2) = p2 {
                assert!(p2.starts_with("Instruction: Check your prediction cautiously.\n\n"));
                assert_eq!(p2.contains("NEGATIVE-KNOWLEDGE"), s == Strategy::Kerap);
            }
        }
        assert!(matches!(
            stage1_prompt(Strategy::Kerap, &visit(), "D", None),
            Err(PredictionError::MissingKnowledge(Strategy::Kerap))
        ));
        assert!(stage1_prompt(Strategy::Direct, &visit(), "D", None).is_ok());
    }
}
