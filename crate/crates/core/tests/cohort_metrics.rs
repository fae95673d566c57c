mod common;

use common::fixtures;
use kerap_core::cohort::{synth_cohort, target_positives, AttributeVocab, Cohort, CohortError, PatientVisit};
use kerap_core::eval::{format_mean_std, score, Confusion, EvalError, MeanStd};
use kerap_core::llm_gateway::TokenUsage;
use kerap_core::prediction::{PredictionOutcome, StageRecord, Strategy, Verdict};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;

fn vocab() -> AttributeVocab {
    AttributeVocab::load(fixtures().join("vocab.toml")).unwrap()
}

fn outcome(id: &str, yes: bool) -> PredictionOutcome {
    let verdict = if yes { Verdict::Yes } else { Verdict::No };
    PredictionOutcome {
        visit_id: id.to_string(),
        disease: "d".into(),
        strategy: Strategy::Direct,
        stage1: StageRecord {
            messages: vec![],
            response: verdict.to_string(),
            first_response: None,
            verdict,
            fallback: false,
        },
        stage2: None,
        final_verdict: verdict,
        usage: TokenUsage::new(3, 1),
        parse_fallbacks: 0,
    }
}

fn cohort_of(labels: &[Option<bool>]) -> Cohort {
    let visits = labels
        .iter()
        .enumerate()
        .map(|(i, l)| PatientVisit {
            visit_id: format!("v{i}"),
            attributes: vec!["a".into()],
            label: *l,
        })
        .collect();
    Cohort::new("d", visits).unwrap()
}

/// Independent formulation: per-class F1 = 2tp / (2tp + fp + fn), 0 when empty.
fn oracle_f1_weighted(labels: &[bool], preds: &[bool]) -> f64 {
    let f1 = |cls: bool| {
        let tp = labels.iter().zip(preds).filter(|(l, p)| **l == cls && **p == cls).count() as f64;
        let fp = labels.iter().zip(preds).filter(|(l, p)| **l != cls && **p == cls).count() as f64;
        let fn_ = labels.iter().zip(preds).filter(|(l, p)| **l == cls && **p != cls).count() as f64;
        if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) }
    };
    let n = labels.len() as f64;
    let n_pos = labels.iter().filter(|l| **l).count() as f64;
    (n_pos * f1(true) + (n - n_pos) * f1(false)) / n
}

#[test]
fn all_yes_on_one_positive_in_four() {
    let cohort = cohort_of(&[Some(true), Some(false), Some(false), Some(false)]);
    let outs: Vec<_> = (0..4).map(|i| outcome(&format!("v{i}"), true)).collect();
    let m = score(&outs, &cohort).unwrap();
    assert_eq!(m.accuracy, 0.25);
    // Positive F1 = 2/5 with weight 1/4; negative F1 = 0.
    assert!((m.f1_weighted - 0.1).abs() < 1e-15);
    assert_eq!(m.confusion, Confusion { tp: 1, fp: 3, tn: 0, fn_: 0 });
    assert_eq!(m.usage, TokenUsage::new(12, 4));
}

#[test]
fn all_yes_on_balanced_four() {
    let cohort = cohort_of(&[Some(true), Some(true), Some(false), Some(false)]);
    let outs: Vec<_> = (0..4).map(|i| outcome(&format!("v{i}"), true)).collect();
    let m = score(&outs, &cohort).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert_eq!(m.f1_weighted, 1.0 / 3.0);
}

#[test]
fn scoring_errors() {
    let cohort = cohort_of(&[Some(true), Some(false)]);
    assert!(matches!(score(&[outcome("v0", true)], &cohort), Err(EvalError::MissingOutcome(ref v)) if v == "v1"));
    let dup = [outcome("v0", true), outcome("v0", true), outcome("v1", true)];
    assert!(matches!(score(&dup, &cohort), Err(EvalError::DuplicateOutcome(_))));
    let stray = [outcome("v0", true), outcome("v1", true), outcome("zz", true)];
    assert!(matches!(score(&stray, &cohort), Err(EvalError::UnknownVisit(_))));
}

#[test]
fn unlabeled_visits_are_excluded() {
    let cohort = cohort_of(&[Some(true), None, Some(false)]);
    let outs = [outcome("v0", true), outcome("v1", false), outcome("v2", false)];
    let m = score(&outs, &cohort).unwrap();
    assert_eq!(m.unlabeled, 1);
    assert_eq!(m.confusion.total(), 2);
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(cohort.prevalence(), Some(0.5));
}

#[test]
fn mean_std_reporting() {
    let ms = MeanStd::of(&[0.7, 0.7, 0.7]);
    assert_eq!(ms.std, 0.0);
    assert_eq!(MeanStd::of(&[0.5]).std, 0.0);
    let ms = MeanStd::of(&[0.1, 0.2, 0.3, 0.4]);
    // Sample variance of 0.1..0.4 is 1/60.
    assert!((ms.std - (1.0f64 / 60.0).sqrt()).abs() < 1e-15);
    assert_eq!(format_mean_std(0.724415, 0.0071), "72.44±0.71");
}

#[test]
fn fixture_cohort_shape() {
    let cohort = Cohort::load(fixtures().join("cohort/psci_200.jsonl")).unwrap();
    assert_eq!(cohort.visits.len(), 200);
    assert_eq!(cohort.positives(), 45);
    assert_eq!(cohort.disease, "Post-stroke cognitive impairment");
}

#[test]
fn cohort_parse_errors() {
    let dup = "{\"disease\":\"d\"}\n{\"visit_id\":\"a\",\"attributes\":[\"x\"]}\n{\"visit_id\":\"a\",\"attributes\":[\"y\"]}\n";
    assert!(matches!(Cohort::from_reader(dup.as_bytes()), Err(CohortError::DuplicateVisit { line: 3, .. })));
    let empty = "{\"disease\":\"d\"}\n{\"visit_id\":\"a\",\"attributes\":[]}\n";
    assert!(matches!(Cohort::from_reader(empty.as_bytes()), Err(CohortError::EmptyAttributes { line: 2, .. })));
    let extra = "{\"disease\":\"d\"}\n{\"visit_id\":\"a\",\"attributes\":[\"x\"],\"age\":3}\n";
    assert!(matches!(Cohort::from_reader(extra.as_bytes()), Err(CohortError::Parse { line: 2, .. })));
}

#[test]
fn synth_is_seed_deterministic() {
    let a = synth_cohort(9, 300, 0.3, &vocab(), "Dementia").unwrap();
    let b = synth_cohort(9, 300, 0.3, &vocab(), "Dementia").unwrap();
    let c = synth_cohort(10, 300, 0.3, &vocab(), "Dementia").unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(synth_cohort(1, 10, 1.5, &vocab(), "d").is_err());
}

fn labels_and_preds() -> impl proptest::strategy::Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..=50).prop_flat_map(|n| {
        (
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn metrics_match_oracle((labels, preds) in labels_and_preds()) {
        let cohort = cohort_of(&labels.iter().map(|l| Some(*l)).collect::<Vec<_>>());
        let outs: Vec<_> = preds.iter().enumerate().map(|(i, p)| outcome(&format!("v{i}"), *p)).collect();
        let m = score(&outs, &cohort).unwrap();
        let correct = labels.iter().zip(&preds).filter(|(l, p)| l == p).count();
        prop_assert!((m.accuracy - correct as f64 / labels.len() as f64).abs() < 1e-12);
        prop_assert!((m.f1_weighted - oracle_f1_weighted(&labels, &preds)).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_outcome_order((labels, preds) in labels_and_preds(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let cohort = cohort_of(&labels.iter().map(|l| Some(*l)).collect::<Vec<_>>());
        let mut outs: Vec<_> = preds.iter().enumerate().map(|(i, p)| outcome(&format!("v{i}"), *p)).collect();
        let before = score(&outs, &cohort).unwrap();
        outs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(before, score(&outs, &cohort).unwrap());
    }

    /// With one class only, perfect predictions score 1 and inverted ones 0.
    #[test]
    fn single_class_cohorts(n in 1usize..50, cls in any::<bool>()) {
        let cohort = cohort_of(&vec![Some(cls); n]);
        let right: Vec<_> = (0..n).map(|i| outcome(&format!("v{i}"), cls)).collect();
        let wrong: Vec<_> = (0..n).map(|i| outcome(&format!("v{i}"), !cls)).collect();
        let r = score(&right, &cohort).unwrap();
        let w = score(&wrong, &cohort).unwrap();
        prop_assert_eq!((r.accuracy, r.f1_weighted), (1.0, 1.0));
        prop_assert_eq!((w.accuracy, w.f1_weighted), (0.0, 0.0));
    }

    #[test]
    fn cohort_round_trip(seed in any::<u64>(), n in 1usize..200, p in 0.0f64..=1.0) {
        let cohort = synth_cohort(seed, n, p, &vocab(), "Dementia").unwrap();
        let mut buf = Vec::new();
        cohort.write_to(&mut buf).unwrap();
        prop_assert_eq!(Cohort::from_reader(buf.as_slice()).unwrap(), cohort);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn synth_positive_count_is_exact(seed in any::<u64>(), n in 0usize..100_000, p in 0.0f64..=1.0) {
        let cohort = synth_cohort(seed, n, p, &vocab(), "Dementia").unwrap();
        prop_assert_eq!(cohort.visits.len(), n);
        prop_assert_eq!(cohort.positives(), target_positives(n, p));
        prop_assert_eq!(target_positives(n, p), (n as f64 * p).round() as usize);
        prop_assert!(cohort.visits.iter().all(|v| (1..=5).contains(&v.attributes.len())));
    }
}
