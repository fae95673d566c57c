mod common;

use common::scripted;
use kerap_core::llm_gateway::{ChatMessage, Role};
use kerap_core::prediction::{
    parse_verdict, predict, stage1_prompt, stage2_prompt, PatientVisit, PredictionConfig, PredictionError,
    Strategy, Verdict,
};
use kerap_core::prompts::{
    EMPTY_KNOWLEDGE_SENTINEL, INSTRUCTION_PREFIX, STAGE2_INSTRUCTION, STRICT_VERDICT_REASK,
};
use kerap_core::retrieval::{KnowledgeBundle, SourceCounts};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;
use regex::Regex;

fn visit() -> PatientVisit {
    PatientVisit {
        visit_id: "v1".into(),
        attributes: vec!["Hypertension".into(), "Atrial fibrillation".into()],
        label: Some(true),
    }
}

fn bundle() -> KnowledgeBundle {
    KnowledgeBundle {
        disease: "Dementia".into(),
        entity: "D003".into(),
        entity_name: "Dementia".into(),
        positive_summary: "POS-KNOWLEDGE".into(),
        negative_summary: "NEG-KNOWLEDGE".into(),
        source_counts: SourceCounts { positive: 2, negative: 1 },
        positive_prompt: None,
        negative_prompt: None,
        usage: Default::default(),
        template_version: "v1".into(),
    }
}

fn cfg() -> PredictionConfig {
    PredictionConfig::default()
}

#[test]
fn direct_single_stage() {
    let (s, gw) = scripted(&["NO."]);
    let o = predict(&gw, &visit(), "Dementia", None, Strategy::Direct, &cfg()).unwrap();
    assert_eq!(o.final_verdict, Verdict::No);
    assert!(o.stage2.is_none());
    assert_eq!(o.parse_fallbacks, 0);
    assert_eq!(s.requests().len(), 1);
    assert_eq!(o.stage1.messages[0].role, Role::System);
    let json = serde_json::to_value(&o).unwrap();
    assert_eq!(json["final"], "NO");
    assert!(json.get("stage2").is_none());
}

#[test]
fn strict_reask_recovers() {
    let (s, gw) = scripted(&["Hard to say.", "yes"]);
    let o = predict(&gw, &visit(), "Dementia", None, Strategy::StepByStep, &cfg()).unwrap();
    assert_eq!(o.final_verdict, Verdict::Yes);
    assert_eq!(o.stage1.first_response.as_deref(), Some("Hard to say."));
    assert!(!o.stage1.fallback);
    let second = &s.requests()[1].messages;
    assert_eq!(second.len(), 4);
    assert_eq!(second[2], ChatMessage::assistant("Hard to say."));
    assert_eq!(second[3], ChatMessage::user(STRICT_VERDICT_REASK));
}

#[test]
fn double_failure_uses_fallback_verdict() {
    let (_, gw) = scripted(&["unclear", "still unclear"]);
    let o = predict(&gw, &visit(), "Dementia", None, Strategy::Direct, &cfg()).unwrap();
    assert_eq!(o.final_verdict, Verdict::Yes);
    assert!(o.stage1.fallback);
    assert_eq!(o.parse_fallbacks, 1);

    let (_, gw) = scripted(&["unclear", "still unclear"]);
    let no_default = PredictionConfig {
        fallback_verdict: Verdict::No,
        ..cfg()
    };
    let o = predict(&gw, &visit(), "Dementia", None, Strategy::Direct, &no_default).unwrap();
    assert_eq!(o.final_verdict, Verdict::No);
}

#[test]
fn kerap_two_stage_transcript() {
    let (s, gw) = scripted(&["YES\nReasoning: risk factors present", "NO\nReasoning: ruled out"]);
    let o = predict(&gw, &visit(), "Dementia", Some(&bundle()), Strategy::Kerap, &cfg()).unwrap();
    assert_eq!(o.stage1.verdict, Verdict::Yes);
    assert_eq!(o.stage2.as_ref().unwrap().verdict, Verdict::No);
    assert_eq!(o.final_verdict, Verdict::No);

    let reqs = s.requests();
    assert_eq!(reqs.len(), 2);
    let (first, second) = (&reqs[0].messages, &reqs[1].messages);
    // Stage 2 extends stage 1's exchange verbatim.
    assert_eq!(&second[..2], &first[..]);
    assert_eq!(second[2], ChatMessage::assistant("YES\nReasoning: risk factors present"));
    assert!(second[3].content.starts_with(&format!("{INSTRUCTION_PREFIX}{STAGE2_INSTRUCTION}")));
    // Positive knowledge only in stage 1, negative only in stage 2.
    assert!(first[1].content.contains("POS-KNOWLEDGE"));
    assert!(!first[1].content.contains("NEG-KNOWLEDGE"));
    assert!(second[3].content.contains("NEG-KNOWLEDGE"));
    assert!(!second[3].content.contains("POS-KNOWLEDGE"));
    assert_eq!(o.usage.prompt_tokens, 20);
}

#[test]
fn knowledge_strategies_require_a_bundle() {
    let (s, gw) = scripted(&[]);
    for strategy in [Strategy::Kerap, Strategy::KgAugmented] {
        let err = predict(&gw, &visit(), "Dementia", None, strategy, &cfg()).unwrap_err();
        assert!(matches!(err, PredictionError::MissingKnowledge(s) if s == strategy));
    }
    let empty = PatientVisit {
        attributes: vec![],
        ..visit()
    };
    assert!(matches!(
        predict(&gw, &empty, "Dementia", None, Strategy::Direct, &cfg()),
        Err(PredictionError::EmptyVisit(_))
    ));
    assert!(s.requests().is_empty());
}

#[test]
fn prompt_shapes_per_strategy() {
    let b = bundle();
    for strategy in Strategy::ALL {
        let p1 = stage1_prompt(strategy, &visit(), "Dementia", Some(&b)).unwrap();
        assert!(p1.starts_with("EHR Data: Hypertension; Atrial fibrillation."), "{p1}");
        assert!(p1.contains("\"Dementia\""));
        let p2 = stage2_prompt(strategy, "Dementia", Some(&b)).unwrap();
        assert_eq!(p2.is_some(), strategy.is_two_stage(), "{strategy}");
        match strategy {
            Strategy::KgAugmented => {
                assert!(p1.contains("POS-KNOWLEDGE") && p1.contains("NEG-KNOWLEDGE"))
            }
            Strategy::Kerap => assert!(p1.contains("POS-KNOWLEDGE") && !p1.contains("NEG-KNOWLEDGE")),
            _ => assert!(!p1.contains("KNOWLEDGE")),
        }
    }
}

#[test]
fn empty_side_renders_sentinel() {
    let mut b = bundle();
    b.negative_summary = EMPTY_KNOWLEDGE_SENTINEL.into();
    let p2 = stage2_prompt(Strategy::Kerap, "Dementia", Some(&b)).unwrap().unwrap();
    assert!(p2.contains(EMPTY_KNOWLEDGE_SENTINEL));
}

fn oracle(text: &str) -> Option<Verdict> {
    let re = Regex::new(r"(?i)\b(yes|no)\b").unwrap();
    let find = |s: &str| {
        re.captures(s).map(|c| {
            if c[1].eq_ignore_ascii_case("yes") {
                Verdict::Yes
            } else {
                Verdict::No
            }
        })
    };
    let first_line = text.split('\n').next().unwrap_or("");
    find(first_line).or_else(|| find(text))
}

fn response_text() -> impl proptest::strategy::Strategy<Value = String> {
    let piece = prop_oneof![
        Just("yes"), Just("YES"), Just("No"), Just("no"), Just("nope"), Just("yesterday"),
        Just("not"), Just("_no"), Just("no_"), Just("2no"), Just(" "), Just("."), Just(","),
        Just("\n"), Just("\r\n"), Just("-"), Just("maybe"), Just("x"), Just("'"), Just("(")
    ];
    proptest::collection::vec(piece, 0..16).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn parse_verdict_matches_regex_oracle(text in response_text()) {
        prop_assert_eq!(parse_verdict(&text).ok(), oracle(&text), "{:?}", text);
    }

    #[test]
    fn parse_verdict_never_panics(text in any::<String>()) {
        let _ = parse_verdict(&text);
    }
}
