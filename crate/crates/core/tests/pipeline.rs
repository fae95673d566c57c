mod common;

use std::collections::HashMap;

use common::fixtures;
use kerap_core::cohort::Cohort;
use kerap_core::eval::{self, Evaluation};
use kerap_core::llm_gateway::{Cassette, TokenUsage};
use kerap_core::pipeline::Pipeline;
use kerap_core::prediction::{Strategy, Verdict};

fn pipeline() -> Pipeline {
    Pipeline::from_config_file(fixtures().join("config.toml")).unwrap()
}

fn cohort() -> Cohort {
    Cohort::load(fixtures().join("cohort/psci_200.jsonl")).unwrap()
}

fn full_evaluation(p: &Pipeline) -> Evaluation {
    eval::evaluate(p, &cohort(), &Strategy::ALL, p.config().runs).unwrap()
}

#[test]
fn replay_matches_golden_report() {
    let p = pipeline();
    let evaluation = full_evaluation(&p);
    let json = eval::report_json(&evaluation.report).unwrap();
    let golden = std::fs::read_to_string(fixtures().join("golden/report.json")).unwrap();
    assert_eq!(json, golden);
    let table = eval::report_table(&evaluation.report).unwrap();
    assert_eq!(table, std::fs::read_to_string(fixtures().join("golden/report.txt")).unwrap());
    for s in &evaluation.report.strategies {
        assert_eq!(s.metrics.accuracy.std, 0.0, "{}", s.method);
        assert_eq!(s.metrics.f1_weighted.std, 0.0, "{}", s.method);
    }
}

#[test]
fn cost_totals_are_exact() {
    let p = pipeline();
    let evaluation = full_evaluation(&p);
    let cassette = Cassette::load(fixtures().join("cassettes/pipeline.jsonl")).unwrap();
    let recorded: HashMap<&str, TokenUsage> =
        cassette.entries().map(|e| (e.fingerprint.as_str(), e.usage)).collect();

    // Every ledger entry carries exactly the usage stored in the cassette.
    let ledger = p.gateway().ledger();
    assert!(ledger.iter().all(|e| recorded[e.fingerprint.as_str()] == e.usage));
    let ledger_total: TokenUsage = ledger.iter().map(|e| e.usage).sum();

    let mut reported = evaluation.report.knowledge.as_ref().unwrap().cost.total_tokens;
    for (strategy, runs) in &evaluation.outcomes {
        let from_outcomes: TokenUsage = runs.iter().flatten().map(|o| o.usage).sum();
        let report = evaluation
            .report
            .strategies
            .iter()
            .find(|s| s.strategy == *strategy)
            .unwrap();
        assert_eq!(report.cost.prompt_tokens, from_outcomes.prompt_tokens);
        assert_eq!(report.cost.completion_tokens, from_outcomes.completion_tokens);
        assert_eq!(report.cost.total_tokens, from_outcomes.total_tokens);
        reported += report.cost.total_tokens;
    }
    assert_eq!(reported, ledger_total.total_tokens);

    let tokens = |s: Strategy| {
        evaluation
            .report
            .strategies
            .iter()
            .find(|r| r.strategy == s)
            .unwrap()
            .cost
            .total_tokens
    };
    assert!(tokens(Strategy::Kerap) > tokens(Strategy::Iterative));
    assert!(tokens(Strategy::Iterative) > tokens(Strategy::Direct));
}

#[test]
fn cached_bundle_spends_no_retrieval_tokens() {
    let p = pipeline();
    let mention = "Post-stroke cognitive impairment";
    let m0 = p.gateway().ledger_mark();
    let (link, first) = p.knowledge(mention).unwrap();
    let m1 = p.gateway().ledger_mark();
    let (_, second) = p.knowledge(mention).unwrap();
    let m2 = p.gateway().ledger_mark();
    assert_eq!(first, second);
    let link_calls = link.transcript.iter().filter(|m| m.role == kerap_core::llm_gateway::Role::Assistant).count();
    assert_eq!(m1 - m0, link_calls + 2, "two summaries on the first call");
    assert_eq!(m2 - m1, link_calls, "only linking on the second call");
    assert_eq!(first.entity, "D001");
    assert_eq!(first.source_counts.positive, 13);
    assert_eq!(first.source_counts.negative, 10);
}

#[test]
fn case_fixtures_replay() {
    let p = pipeline();
    let mut verdicts = Vec::new();
    for name in ["case_a", "case_b"] {
        let case = Cohort::load(fixtures().join(format!("cases/{name}.jsonl"))).unwrap();
        let (_, bundle) = p.knowledge(&case.disease).unwrap();
        let o = p
            .predict(&case.visits[0], &case.disease, Some(&bundle), Strategy::Kerap)
            .unwrap();
        assert_eq!(o.parse_fallbacks, 0);
        verdicts.push((o.stage1.verdict, o.stage2.unwrap().verdict, o.final_verdict));
    }
    assert_eq!(verdicts[0], (Verdict::Yes, Verdict::No, Verdict::No));
    assert_eq!(verdicts[1].2, Verdict::Yes);
}

#[test]
fn parallel_predictions_keep_cohort_order() {
    let p = pipeline();
    let cohort = cohort();
    let outs = p
        .predict_cohort(&cohort, &cohort.disease, None, Strategy::Direct)
        .unwrap();
    let ids: Vec<_> = outs.iter().map(|o| o.visit_id.as_str()).collect();
    let want: Vec<_> = cohort.visits.iter().map(|v| v.visit_id.as_str()).collect();
    assert_eq!(ids, want);
}
