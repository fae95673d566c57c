//! In-memory multi-relational knowledge graph.
//!
//! Entities and triples are ingested from tab-separated files in a single
//! streaming pass and packed into interned integer arrays, so a store with
//! tens of millions of triples stays within a few hundred bytes per edge.
//! After ingest the store is immutable and can be shared across threads.

mod lexicon;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lexicon::{classify_polarity, Polarity, PolarityLexicon, DEFAULT_NEGATIVE_MARKERS};

pub const ENTITY_HEADER: [&str; 3] = ["id", "name", "category"];
pub const TRIPLE_HEADER: [&str; 3] = ["head", "predicate", "tail"];
pub const DEFAULT_NEIGHBORHOOD_CAP: usize = 200;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file} file line {line}: {message}")]
    Parse {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error("entity file line {line}: duplicate entity id `{id}`")]
    DuplicateEntity { id: String, line: usize },
    #[error("ingest needs ~{needed} bytes, over the {budget}-byte memory budget")]
    MemoryBudgetExceeded { budget: u64, needed: u64 },
    #[error("entity `{0}` not found")]
    EntityNotFound(String),
    #[error("lexicon {path}: {message}")]
    Lexicon { path: String, message: String },
}

impl KgError {
    /// Row-level parse errors can be skipped with [`IngestOptions::skip_malformed`].
    pub fn is_recoverable(&self) -> bool {
        matches!(self, KgError::Parse { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTriple {
    pub head: String,
    pub predicate: String,
    pub tail: String,
}

impl RelationTriple {
    pub fn new(head: impl Into<String>, predicate: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            predicate: predicate.into(),
            tail: tail.into(),
        }
    }
}

/// Incident triples of one entity, split by polarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarizedNeighborhood {
    pub entity: String,
    pub positive: Vec<RelationTriple>,
    pub negative: Vec<RelationTriple>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Allowed entity categories. `None` accepts any category.
    pub categories: Option<Vec<String>>,
    /// Skip rows that fail to parse instead of aborting.
    pub skip_malformed: bool,
    /// Abort when the estimated store footprint exceeds this many bytes.
    pub memory_budget_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub entities: usize,
    pub triples: usize,
    pub dangling_triples: usize,
    pub malformed_rows: usize,
}

#[derive(Debug, Clone, Copy)]
struct PackedTriple {
    head: u32,
    predicate: u32,
    tail: u32,
}

#[derive(Debug)]
pub struct KgStore {
    entities: Vec<Entity>,
    by_id: HashMap<String, u32>,
    predicates: Vec<String>,
    triples: Vec<PackedTriple>,
    // CSR adjacency: incident[offsets[e]..offsets[e + 1]] are triple indices.
    offsets: Vec<u32>,
    incident: Vec<u32>,
    stats: IngestStats,
}

impl KgStore {
    pub fn ingest_files(
        entity_path: impl AsRef<Path>,
        triple_path: impl AsRef<Path>,
        opts: &IngestOptions,
    ) -> Result<Self, KgError> {
        let entities = BufReader::new(File::open(entity_path)?);
        let triples = BufReader::new(File::open(triple_path)?);
        Self::ingest(entities, triples, opts)
    }

    pub fn ingest<E: BufRead, T: BufRead>(
        entity_src: E,
        triple_src: T,
        opts: &IngestOptions,
    ) -> Result<Self, KgError> {
        let mut stats = IngestStats::default();
        let mut entities = Vec::new();
        let mut by_id: HashMap<String, u32> = HashMap::new();
        let mut entity_bytes: u64 = 0;

        for row in TsvRows::new(entity_src, "entity", ENTITY_HEADER) {
            let (line, fields) = match row {
                Ok(r) => r,
                Err(e) if opts.skip_malformed && e.is_recoverable() => {
                    stats.malformed_rows += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let [id, name, category] = fields;
            if let Some(allowed) = &opts.categories {
                if !allowed.iter().any(|c| c == &category) {
                    let err = KgError::Parse {
                        file: "entity",
                        line,
                        message: format!("unknown category `{category}`"),
                    };
                    if opts.skip_malformed {
                        stats.malformed_rows += 1;
                        continue;
                    }
                    return Err(err);
                }
            }
            if by_id.contains_key(&id) {
                return Err(KgError::DuplicateEntity { id, line });
            }
            entity_bytes += entity_footprint(&id, &name, &category);
            by_id.insert(id.clone(), entities.len() as u32);
            entities.push(Entity { id, name, category });
            check_budget(opts, entity_bytes)?;
        }

        let mut predicate_ids: HashMap<String, u32> = HashMap::new();
        let mut predicates = Vec::new();
        let mut triples = Vec::new();
        let mut predicate_bytes: u64 = 0;
        for row in TsvRows::new(triple_src, "triple", TRIPLE_HEADER) {
            let (_, fields) = match row {
                Ok(r) => r,
                Err(e) if opts.skip_malformed && e.is_recoverable() => {
                    stats.malformed_rows += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let [head, predicate, tail] = fields;
            let (Some(&h), Some(&t)) = (by_id.get(&head), by_id.get(&tail)) else {
                stats.dangling_triples += 1;
                continue;
            };
            let p = match predicate_ids.get(&predicate) {
                Some(&p) => p,
                None => {
                    let p = predicates.len() as u32;
                    predicate_bytes += predicate.len() as u64 + 48;
                    predicate_ids.insert(predicate.clone(), p);
                    predicates.push(predicate);
                    p
                }
            };
            triples.push(PackedTriple {
                head: h,
                predicate: p,
                tail: t,
            });
            if triples.len() % 65_536 == 0 {
                check_budget(
                    opts,
                    entity_bytes + predicate_bytes + triple_footprint(triples.len(), entities.len()),
                )?;
            }
        }
        check_budget(
            opts,
            entity_bytes + predicate_bytes + triple_footprint(triples.len(), entities.len()),
        )?;

        let (offsets, incident) = build_adjacency(entities.len(), &triples);
        stats.entities = entities.len();
        stats.triples = triples.len();
        tracing::debug!(
            entities = stats.entities,
            triples = stats.triples,
            dangling = stats.dangling_triples,
            "knowledge graph ingested"
        );
        Ok(Self {
            entities,
            by_id,
            predicates,
            triples,
            offsets,
            incident,
            stats,
        })
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.by_id.get(id).map(|&i| &self.entities[i as usize])
    }

    pub fn entities(&self) -> impl ExactSizeIterator<Item = &Entity> + '_ {
        self.entities.iter()
    }

    pub fn triples(&self) -> impl ExactSizeIterator<Item = RelationTriple> + '_ {
        self.triples.iter().map(|t| self.unpack(t))
    }

    /// Rough heap footprint of the store in bytes.
    pub fn approx_heap_bytes(&self) -> u64 {
        let entity_bytes: u64 = self
            .entities
            .iter()
            .map(|e| entity_footprint(&e.id, &e.name, &e.category))
            .sum();
        let predicate_bytes: u64 = self.predicates.iter().map(|p| p.len() as u64 + 48).sum();
        entity_bytes + predicate_bytes + triple_footprint(self.triples.len(), self.entities.len())
    }

    fn unpack(&self, t: &PackedTriple) -> RelationTriple {
        RelationTriple {
            head: self.entities[t.head as usize].id.clone(),
            predicate: self.predicates[t.predicate as usize].clone(),
            tail: self.entities[t.tail as usize].id.clone(),
        }
    }

    /// Incident triples of `entity_id` (as head or tail), split by polarity.
    ///
    /// Each side is ordered by `(predicate, tail id, head id)` and truncated
    /// to `cap`.
    pub fn neighborhood(
        &self,
        entity_id: &str,
        lexicon: &PolarityLexicon,
        cap: usize,
    ) -> Result<PolarizedNeighborhood, KgError> {
        let idx = *self
            .by_id
            .get(entity_id)
            .ok_or_else(|| KgError::EntityNotFound(entity_id.to_string()))? as usize;
        let incident = &self.incident[self.offsets[idx] as usize..self.offsets[idx + 1] as usize];

        let mut polarity_of: HashMap<u32, Polarity> = HashMap::new();
        let mut positive = Vec::new();
        let mut negative = Vec::new();
        for &ti in incident {
            let t = &self.triples[ti as usize];
            let pol = *polarity_of
                .entry(t.predicate)
                .or_insert_with(|| lexicon.classify(&self.predicates[t.predicate as usize]));
            match pol {
                Polarity::Positive => positive.push(t),
                Polarity::Negative => negative.push(t),
            }
        }
        Ok(PolarizedNeighborhood {
            entity: entity_id.to_string(),
            positive: self.ordered_capped(positive, cap),
            negative: self.ordered_capped(negative, cap),
        })
    }

    fn ordered_capped(&self, mut triples: Vec<&PackedTriple>, cap: usize) -> Vec<RelationTriple> {
        triples.sort_by(|a, b| {
            let key = |t: &PackedTriple| {
                (
                    self.predicates[t.predicate as usize].as_str(),
                    self.entities[t.tail as usize].id.as_str(),
                    self.entities[t.head as usize].id.as_str(),
                )
            };
            key(a).cmp(&key(b))
        });
        triples.truncate(cap);
        triples.into_iter().map(|t| self.unpack(t)).collect()
    }

    /// Writes the store back out in the ingest formats.
    pub fn export<E: Write, T: Write>(&self, mut entity_out: E, mut triple_out: T) -> std::io::Result<()> {
        writeln!(entity_out, "{}", ENTITY_HEADER.join("\t"))?;
        for e in &self.entities {
            writeln!(entity_out, "{}\t{}\t{}", e.id, e.name, e.category)?;
        }
        writeln!(triple_out, "{}", TRIPLE_HEADER.join("\t"))?;
        for t in self.triples() {
            writeln!(triple_out, "{}\t{}\t{}", t.head, t.predicate, t.tail)?;
        }
        entity_out.flush()?;
        triple_out.flush()
    }
}

fn entity_footprint(id: &str, name: &str, category: &str) -> u64 {
    // Three owned strings in the entity, one id copy in the lookup map plus
    // its slot.
    (2 * id.len() + name.len() + category.len()) as u64 + 4 * 24 + 16
}

fn triple_footprint(triples: usize, entities: usize) -> u64 {
    // 12 bytes packed, 4 bytes per incident slot (two per triple), offsets.
    (triples as u64) * (12 + 8) + (entities as u64 + 1) * 4
}

fn check_budget(opts: &IngestOptions, needed: u64) -> Result<(), KgError> {
    match opts.memory_budget_bytes {
        Some(budget) if needed > budget => Err(KgError::MemoryBudgetExceeded { budget, needed }),
        _ => Ok(()),
    }
}

fn build_adjacency(entity_count: usize, triples: &[PackedTriple]) -> (Vec<u32>, Vec<u32>) {
    let mut degree = vec![0u32; entity_count + 1];
    for t in triples {
        degree[t.head as usize] += 1;
        if t.tail != t.head {
            degree[t.tail as usize] += 1;
        }
    }
    let mut offsets = vec![0u32; entity_count + 1];
    for i in 0..entity_count {
        offsets[i + 1] = offsets[i] + degree[i];
    }
    let mut cursor = offsets.clone();
    let mut incident = vec![0u32; offsets[entity_count] as usize];
    for (ti, t) in triples.iter().enumerate() {
        incident[cursor[t.head as usize] as usize] = ti as u32;
        cursor[t.head as usize] += 1;
        if t.tail != t.head {
            incident[cursor[t.tail as usize] as usize] = ti as u32;
            cursor[t.tail as usize] += 1;
        }
    }
    (offsets, incident)
}

/// Header-checked three-column TSV reader yielding `(line number, fields)`.
struct TsvRows<R> {
    lines: std::io::Lines<R>,
    file: &'static str,
    header: [&'static str; 3],
    line_no: usize,
    seen_header: bool,
}

impl<R: BufRead> TsvRows<R> {
    fn new(src: R, file: &'static str, header: [&'static str; 3]) -> Self {
        Self {
            lines: src.lines(),
            file,
            header,
            line_no: 0,
            seen_header: false,
        }
    }

    fn parse_err(&self, message: impl Into<String>) -> KgError {
        KgError::Parse {
            file: self.file,
            line: self.line_no,
            message: message.into(),
        }
    }
}

impl<R: BufRead> Iterator for TsvRows<R> {
    type Item = Result<(usize, [String; 3]), KgError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.line_no += 1;
                    let err = if e.kind() == std::io::ErrorKind::InvalidData {
                        self.parse_err("invalid UTF-8")
                    } else {
                        KgError::Io(e)
                    };
                    return Some(Err(err));
                }
            };
            self.line_no += 1;
            let line = raw.strip_suffix('\r').unwrap_or(&raw);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !self.seen_header {
                self.seen_header = true;
                if fields != self.header {
                    return Some(Err(self.parse_err(format!(
                        "expected header `{}`",
                        self.header.join("\\t")
                    ))));
                }
                continue;
            }
            if fields.len() != 3 {
                return Some(Err(
                    self.parse_err(format!("expected 3 tab-separated fields, found {}", fields.len()))
                ));
            }
            if let Some(pos) = fields.iter().position(|f| f.trim().is_empty()) {
                return Some(Err(self.parse_err(format!("empty `{}` field", self.header[pos]))));
            }
            let row = [
                fields[0].to_string(),
                fields[1].to_string(),
                fields[2].to_string(),
            ];
            return Some(Ok((self.line_no, row)));
        }
    }
}
