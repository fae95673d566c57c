//! Patient-visit cohorts: JSON-lines loading, writing and synthetic generation.
//!
//! File layout: a header line `{"disease": "<mention>"}` followed by one
//! `{"visit_id": ..., "attributes": [...], "label": true|false|null}` per visit.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::prediction::PatientVisit;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate visit id `{id}`")]
    DuplicateVisit { id: String, line: usize },
    #[error("line {line}: visit `{id}` has no attributes")]
    EmptyAttributes { id: String, line: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub disease: String,
    pub visits: Vec<PatientVisit>,
}

#[derive(Deserialize)]
struct Header {
    disease: String,
}

#[derive(Serialize)]
struct HeaderRef<'a> {
    disease: &'a str,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VisitLine {
    visit_id: String,
    attributes: Vec<String>,
    #[serde(default)]
    label: Option<bool>,
}

impl Cohort {
    /// Validates visit ids and attribute lists.
    pub fn new(disease: impl Into<String>, visits: Vec<PatientVisit>) -> Result<Self, CohortError> {
        let mut seen = HashSet::new();
        for (i, v) in visits.iter().enumerate() {
            // Header is line 1, so visit i sits on line i + 2.
            let line = i + 2;
            if v.attributes.is_empty() {
                return Err(CohortError::EmptyAttributes {
                    id: v.visit_id.clone(),
                    line,
                });
            }
            if !seen.insert(v.visit_id.as_str()) {
                return Err(CohortError::DuplicateVisit {
                    id: v.visit_id.clone(),
                    line,
                });
            }
        }
        Ok(Self {
            disease: disease.into(),
            visits,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CohortError> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, CohortError> {
        let mut disease = None;
        let mut visits = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| CohortError::Parse {
                line: line_no,
                message: e.to_string(),
            };
            if disease.is_none() {
                let h: Header = serde_json::from_str(&line).map_err(parse_err)?;
                if h.disease.trim().is_empty() {
                    return Err(CohortError::Parse {
                        line: line_no,
                        message: "disease is empty".into(),
                    });
                }
                disease = Some(h.disease);
                continue;
            }
            let v: VisitLine = serde_json::from_str(&line).map_err(parse_err)?;
            if v.attributes.is_empty() {
                return Err(CohortError::EmptyAttributes {
                    id: v.visit_id,
                    line: line_no,
                });
            }
            if !seen.insert(v.visit_id.clone()) {
                return Err(CohortError::DuplicateVisit {
                    id: v.visit_id,
                    line: line_no,
                });
            }
            visits.push(PatientVisit {
                visit_id: v.visit_id,
                attributes: v.attributes,
                label: v.label,
            });
        }
        let disease = disease.ok_or(CohortError::Parse {
            line: 1,
            message: "missing disease header".into(),
        })?;
        Ok(Self { disease, visits })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CohortError> {
        serde_json::to_writer(&mut w, &HeaderRef { disease: &self.disease })
            .map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for v in &self.visits {
            serde_json::to_writer(&mut w, v).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CohortError> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn labeled(&self) -> usize {
        self.visits.iter().filter(|v| v.label.is_some()).count()
    }

    pub fn positives(&self) -> usize {
        self.visits.iter().filter(|v| v.label == Some(true)).count()
    }

    /// Positive fraction among labeled visits; `None` if nothing is labeled.
    pub fn prevalence(&self) -> Option<f64> {
        match self.labeled() {
            0 => None,
            n => Some(self.positives() as f64 / n as f64),
        }
    }
}

/// Attribute pools for synthetic visits. Positives draw mostly from
/// `indicative`, negatives mostly from `exclusionary`; both mix in
/// `background`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeVocab {
    #[serde(default)]
    pub indicative: Vec<String>,
    #[serde(default)]
    pub exclusionary: Vec<String>,
    #[serde(default)]
    pub background: Vec<String>,
}

impl AttributeVocab {
    pub fn from_toml_str(s: &str) -> Result<Self, CohortError> {
        toml::from_str(s).map_err(|e| CohortError::InvalidInput(format!("vocabulary: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CohortError> {
        Self::from_toml_str(&std::fs::read_to_string(path.as_ref())?)
    }

    pub fn is_empty(&self) -> bool {
        self.indicative.is_empty() && self.exclusionary.is_empty() && self.background.is_empty()
    }
}

/// Exact positive count for `n` visits at `prevalence`, rounding half away from zero.
pub fn target_positives(n: usize, prevalence: f64) -> usize {
    (n as f64 * prevalence).round() as usize
}

/// Deterministic synthetic cohort with exactly `round(n * prevalence)` positives.
pub fn synth_cohort(
    seed: u64,
    n: usize,
    prevalence: f64,
    vocab: &AttributeVocab,
    disease: &str,
) -> Result<Cohort, CohortError> {
    if !(0.0..=1.0).contains(&prevalence) {
        return Err(CohortError::InvalidInput(format!(
            "prevalence {prevalence} is outside [0, 1]"
        )));
    }
    if vocab.is_empty() {
        return Err(CohortError::InvalidInput("attribute vocabulary is empty".into()));
    }
    if disease.trim().is_empty() {
        return Err(CohortError::InvalidInput("disease is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![false; n];
    labels[..target_positives(n, prevalence)].fill(true);
    labels.shuffle(&mut rng);

    let width = n.saturating_sub(1).to_string().len().max(4);
    let all: Vec<&String> = vocab
        .indicative
        .iter()
        .chain(&vocab.exclusionary)
        .chain(&vocab.background)
        .collect();
    let visits = labels
        .into_iter()
        .enumerate()
        .map(|(i, positive)| {
            let primary = if positive { &vocab.indicative } else { &vocab.exclusionary };
            let count = rng.random_range(2..=5usize);
            let mut order: Vec<String> = Vec::with_capacity(count);
            for _ in 0..count {
                let pool: Vec<&String> = if !primary.is_empty() && rng.random_bool(0.6) {
                    primary.iter().collect()
                } else if !vocab.background.is_empty() {
                    vocab.background.iter().collect()
                } else {
                    all.clone()
                };
                let a = pool[rng.random_range(0..pool.len())];
                if !order.contains(a) {
                    order.push(a.clone());
                }
            }
            PatientVisit {
                visit_id: format!("v{i:0width$}"),
                attributes: order,
                label: Some(positive),
            }
        })
        .collect();
    Cohort::new(disease, visits)
}
