//! Scoring, repeated evaluation runs and report rendering.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Cohort;
use crate::llm_gateway::{meter, CostReport, GatewayMode, LedgerEntry, MeterError, TokenUsage};
use crate::pipeline::{Pipeline, PipelineError};
use crate::prediction::{PredictionOutcome, Strategy};
use crate::retrieval::KnowledgeBundle;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no outcome for labeled visit `{0}`")]
    MissingOutcome(String),
    #[error("more than one outcome for visit `{0}`")]
    DuplicateOutcome(String),
    #[error("outcome for visit `{0}` is not in the cohort")]
    UnknownVisit(String),
    #[error("run count must be at least 1")]
    NoRuns,
    #[error("no strategies to evaluate or report")]
    NoStrategies,
    #[error("{strategy} run {run} failed: {source}")]
    Run {
        strategy: Strategy,
        run: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Pipeline(#[from] Box<PipelineError>),
    #[error(transparent)]
    Meter(#[from] MeterError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub confusion: Confusion,
    /// Visits without a label; predicted but left out of the metrics.
    pub unlabeled: usize,
    pub parse_fallbacks: u32,
    pub usage: TokenUsage,
    pub wall_time_secs: f64,
}

/// Precision/recall harmonic mean for one class, 0 when undefined.
fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp == 0 || tp + fn_ == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl Confusion {
    /// `(tp + tn) / N`; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => (self.tp + self.tn) as f64 / n as f64,
        }
    }

    /// Support-weighted mean of the positive- and negative-class F1.
    pub fn f1_weighted(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        let f1_pos = class_f1(self.tp, self.fp, self.fn_);
        // Negative class as positive: its true positives are tn.
        let f1_neg = class_f1(self.tn, self.fn_, self.fp);
        let n_pos = (self.tp + self.fn_) as f64;
        let n_neg = (self.tn + self.fp) as f64;
        (n_pos * f1_pos + n_neg * f1_neg) / n as f64
    }
}

/// Scores one run's outcomes against the cohort labels.
pub fn score(outcomes: &[PredictionOutcome], cohort: &Cohort) -> Result<RunMetrics, EvalError> {
    let labels: HashMap<&str, Option<bool>> = cohort
        .visits
        .iter()
        .map(|v| (v.visit_id.as_str(), v.label))
        .collect();
    let mut by_visit: HashMap<&str, &PredictionOutcome> = HashMap::with_capacity(outcomes.len());
    for o in outcomes {
        if !labels.contains_key(o.visit_id.as_str()) {
            return Err(EvalError::UnknownVisit(o.visit_id.clone()));
        }
        if by_visit.insert(o.visit_id.as_str(), o).is_some() {
            return Err(EvalError::DuplicateOutcome(o.visit_id.clone()));
        }
    }

    let mut c = Confusion::default();
    let mut unlabeled = 0;
    for v in &cohort.visits {
        let Some(label) = v.label else {
            unlabeled += 1;
            continue;
        };
        let o = by_visit
            .get(v.visit_id.as_str())
            .ok_or_else(|| EvalError::MissingOutcome(v.visit_id.clone()))?;
        match (o.final_verdict.as_bool(), label) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    if unlabeled > 0 {
        tracing::warn!(unlabeled, "unlabeled visits excluded from metrics");
    }
    Ok(RunMetrics {
        accuracy: c.accuracy(),
        f1_weighted: c.f1_weighted(),
        confusion: c,
        unlabeled,
        parse_fallbacks: outcomes.iter().map(|o| o.parse_fallbacks).sum(),
        usage: outcomes.iter().map(|o| &o.usage).sum(),
        wall_time_secs: 0.0,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (denominator `n - 1`, 0 for `n < 2`).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        // Shifting by the first value makes identical inputs give exactly 0.
        let shift = values[0];
        let mean_dev = values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
        let mean = shift + mean_dev;
        let std = if n < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - shift - mean_dev).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }

    /// Percentages to two decimals, e.g. `72.44±0.71`.
    pub fn percent(&self) -> String {
        format_mean_std(self.mean, self.std)
    }
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", mean * 100.0, std * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub accuracy: MeanStd,
    pub f1_weighted: MeanStd,
    pub per_run: Vec<RunMetrics>,
}

impl AggregateMetrics {
    pub fn from_runs(per_run: Vec<RunMetrics>) -> Self {
        let acc: Vec<f64> = per_run.iter().map(|r| r.accuracy).collect();
        let f1: Vec<f64> = per_run.iter().map(|r| r.f1_weighted).collect();
        Self {
            runs: per_run.len(),
            accuracy: MeanStd::of(&acc),
            f1_weighted: MeanStd::of(&f1),
            per_run,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub method: String,
    pub metrics: AggregateMetrics,
    /// Prediction calls only, summed over all runs.
    pub cost: CostReport,
    pub parse_fallbacks: u32,
}

/// One-off linking and retrieval for the cohort's disease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSummary {
    pub entity: String,
    pub entity_name: String,
    pub link_fallback: bool,
    pub positive_relations: usize,
    pub negative_relations: usize,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub disease: String,
    pub visits: usize,
    pub labeled: usize,
    pub prevalence: Option<f64>,
    pub model: String,
    pub template_version: String,
    pub runs: usize,
    pub std_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<KnowledgeSummary>,
    pub strategies: Vec<StrategyReport>,
}

pub const STD_NOTE: &str = "sample standard deviation over runs (denominator R-1; 0 when R=1)";

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub bundle: Option<KnowledgeBundle>,
    /// Outcomes per strategy, one inner list per run.
    pub outcomes: Vec<(Strategy, Vec<Vec<PredictionOutcome>>)>,
}

/// Wall time of a ledger slice. Replay has no real latency, so it uses the
/// recorded latencies summed; other modes use the measured elapsed time.
fn wall_time(mode: GatewayMode, entries: &[LedgerEntry], elapsed: Duration) -> Duration {
    match mode {
        GatewayMode::Replay => Duration::from_millis(entries.iter().map(|e| e.latency_ms).sum()),
        GatewayMode::Live | GatewayMode::Record => elapsed,
    }
}

/// Runs every strategy `runs` times over the cohort.
///
/// Linking and retrieval happen once before any run and are costed
/// separately. Runs execute in order; visits within a run are predicted in
/// parallel on the pipeline's pool.
pub fn evaluate(
    pipeline: &Pipeline,
    cohort: &Cohort,
    strategies: &[Strategy],
    runs: usize,
) -> Result<Evaluation, EvalError> {
    if runs == 0 {
        return Err(EvalError::NoRuns);
    }
    if strategies.is_empty() {
        return Err(EvalError::NoStrategies);
    }
    let gateway = pipeline.gateway();
    let model = &pipeline.config().llm.model;
    let pricing = pipeline.pricing();

    let (knowledge, bundle) = if strategies.iter().any(|s| s.uses_knowledge()) {
        let mark = gateway.ledger_mark();
        let started = Instant::now();
        let (link, bundle) = pipeline.knowledge(&cohort.disease).map_err(Box::new)?;
        let entries = gateway.ledger_since(mark);
        let cost = meter(
            entries.iter().map(|e| &e.usage),
            pricing,
            model,
            wall_time(gateway.mode(), &entries, started.elapsed()),
        )?;
        let summary = KnowledgeSummary {
            entity: bundle.entity.clone(),
            entity_name: bundle.entity_name.clone(),
            link_fallback: link.fallback,
            positive_relations: bundle.source_counts.positive,
            negative_relations: bundle.source_counts.negative,
            cost,
        };
        (Some(summary), Some(bundle))
    } else {
        (None, None)
    };

    let mut reports = Vec::with_capacity(strategies.len());
    let mut all_outcomes = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let mut per_run = Vec::with_capacity(runs);
        let mut strategy_entries = Vec::new();
        let mut strategy_wall = Duration::ZERO;
        let mut run_outcomes = Vec::with_capacity(runs);
        for run in 0..runs {
            let mark = gateway.ledger_mark();
            let started = Instant::now();
            let outcomes = pipeline
                .predict_cohort(cohort, &cohort.disease, bundle.as_ref(), strategy)
                .map_err(|e| EvalError::Run {
                    strategy,
                    run,
                    source: Box::new(e),
                })?;
            let entries = gateway.ledger_since(mark);
            let wall = wall_time(gateway.mode(), &entries, started.elapsed());
            let mut metrics = score(&outcomes, cohort)?;
            metrics.wall_time_secs = wall.as_secs_f64();
            tracing::info!(
                %strategy,
                run,
                accuracy = metrics.accuracy,
                f1 = metrics.f1_weighted,
                tokens = metrics.usage.total_tokens,
                "run finished"
            );
            per_run.push(metrics);
            strategy_entries.extend(entries);
            strategy_wall += wall;
            run_outcomes.push(outcomes);
        }
        let cost = meter(strategy_entries.iter().map(|e| &e.usage), pricing, model, strategy_wall)?;
        let metrics = AggregateMetrics::from_runs(per_run);
        reports.push(StrategyReport {
            strategy,
            method: strategy.display_name().to_string(),
            parse_fallbacks: metrics.per_run.iter().map(|r| r.parse_fallbacks).sum(),
            metrics,
            cost,
        });
        all_outcomes.push((strategy, run_outcomes));
    }

    Ok(Evaluation {
        report: EvaluationReport {
            disease: cohort.disease.clone(),
            visits: cohort.visits.len(),
            labeled: cohort.labeled(),
            prevalence: cohort.prevalence(),
            model: model.clone(),
            template_version: crate::prompts::TEMPLATE_VERSION.to_string(),
            runs,
            std_kind: STD_NOTE.to_string(),
            knowledge,
            strategies: reports,
        },
        bundle,
        outcomes: all_outcomes,
    })
}

/// Pretty JSON with a trailing newline.
pub fn report_json(report: &EvaluationReport) -> Result<String, EvalError> {
    if report.strategies.is_empty() {
        return Err(EvalError::NoStrategies);
    }
    let mut out = serde_json::to_string_pretty(report).expect("report serializes");
    out.push('\n');
    Ok(out)
}

/// Aligned text table of performance and cost per strategy.
pub fn report_table(report: &EvaluationReport) -> Result<String, EvalError> {
    if report.strategies.is_empty() {
        return Err(EvalError::NoStrategies);
    }
    let header = ["Method", "ACC (%)", "F1 (%)", "Tokens", "Cost ($)", "Time (s)"];
    let rows: Vec<[String; 6]> = report
        .strategies
        .iter()
        .map(|s| {
            [
                s.method.clone(),
                s.metrics.accuracy.percent(),
                s.metrics.f1_weighted.percent(),
                s.cost.total_tokens.to_string(),
                format!("{:.4}", s.cost.token_cost),
                format!("{:.2}", s.cost.wall_time_secs),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[&str]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        padded.join(" | ").trim_end().to_string()
    };

    let mut out = String::new();
    let prevalence = report
        .prevalence
        .map_or("n/a".to_string(), |p| format!("{:.2}%", p * 100.0));
    out.push_str(&format!(
        "{} ({} visits, {} labeled, prevalence {prevalence}, model {}, {} run(s))\n",
        report.disease, report.visits, report.labeled, report.model, report.runs
    ));
    out.push_str(&line(&header));
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("-+-"));
    out.push('\n');
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        out.push_str(&line(&cells));
        out.push('\n');
    }
    if let Some(k) = &report.knowledge {
        out.push_str(&format!(
            "Knowledge preparation for {} ({} +, {} -): {} tokens, ${:.4}, {:.2} s\n",
            k.entity_name,
            k.positive_relations,
            k.negative_relations,
            k.cost.total_tokens,
            k.cost.token_cost,
            k.cost.wall_time_secs
        ));
    }
    out.push_str(&format!("±: {}\n", report.std_kind));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prediction::{PatientVisit, StageRecord, Verdict};

    fn cohort(labels: &[Option<bool>]) -> Cohort {
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

    fn outcome(id: &str, v: Verdict) -> PredictionOutcome {
        PredictionOutcome {
            visit_id: id.into(),
            disease: "d".into(),
            strategy: Strategy::Direct,
            stage1: StageRecord {
                messages: vec![],
                response: v.to_string(),
                first_response: None,
                verdict: v,
                fallback: false,
            },
            stage2: None,
            final_verdict: v,
            usage: TokenUsage::new(3, 1),
            parse_fallbacks: 0,
        }
    }

    #[test]
    fn all_yes_on_balanced_four() {
        let c = cohort(&[Some(true), Some(true), Some(false), Some(false)]);
        let outs: Vec<_> = (0..4).map(|i| outcome(&format!("v{i}"), Verdict::Yes)).collect();
        let m = score(&outs, &c).unwrap();
        assert_eq!(m.accuracy, 0.5);
        // F1_pos = 2/3, F1_neg = 0, weighted by 2/4 each.
        assert_eq!(m.f1_weighted, (2.0 * (2.0 / 3.0) + 2.0 * 0.0) / 4.0);
        assert_eq!(m.usage.total_tokens, 16);
    }

    #[test]
    fn perfect_predictions() {
        let c = cohort(&[Some(true), Some(false)]);
        let outs = vec![outcome("v0", Verdict::Yes), outcome("v1", Verdict::No)];
        let m = score(&outs, &c).unwrap();
        assert_eq!((m.accuracy, m.f1_weighted), (1.0, 1.0));
    }

    #[test]
    fn missing_and_unlabeled() {
        let c = cohort(&[Some(true), None]);
        assert!(matches!(score(&[], &c), Err(EvalError::MissingOutcome(id)) if id == "v0"));
        let m = score(&[outcome("v0", Verdict::Yes)], &c).unwrap();
        assert_eq!(m.unlabeled, 1);
        assert_eq!(m.confusion.total(), 1);
        assert!(matches!(
            score(&[outcome("v0", Verdict::Yes), outcome("v0", Verdict::No)], &c),
            Err(EvalError::DuplicateOutcome(_))
        ));
    }

    #[test]
    fn sample_std() {
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        let same = MeanStd::of(&[0.23782265411478892; 5]);
        assert_eq!(same.std, 0.0);
        assert_eq!(same.mean, 0.23782265411478892);
    }

    #[test]
    fn mean_std_format() {
        assert_eq!(format_mean_std(0.724415, 0.0071), "72.44±0.71");
        assert_eq!(format_mean_std(1.0, 0.0), "100.00±0.00");
    }
}
