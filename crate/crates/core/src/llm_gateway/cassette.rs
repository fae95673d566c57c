use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fingerprint, ChatMessage, Completion, CompletionRequest, GatewayError, TokenUsage};

/// One recorded exchange. Serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    pub response: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
}

impl CassetteEntry {
    pub fn new(req: &CompletionRequest, completion: &Completion) -> Self {
        Self {
            fingerprint: req.fingerprint(),
            model: req.model.clone(),
            temperature: req.temperature,
            messages: req.messages.clone(),
            response: completion.text.clone(),
            usage: completion.usage,
            latency_ms: completion.latency_ms,
        }
    }
}

/// Fingerprint-keyed recordings, written sorted by fingerprint so the file
/// is byte-stable regardless of recording order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cassette {
    entries: BTreeMap<String, CassetteEntry>,
}

impl Cassette {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| GatewayError::Cassette {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_reader(BufReader::new(file)).map_err(|message| GatewayError::Cassette {
            path: path.display().to_string(),
            message,
        })
    }

    /// Parses JSON lines. Each entry's fingerprint is recomputed from its
    /// request fields and must match.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| format!("line {line_no}: {e}"))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry =
                serde_json::from_str(&line).map_err(|e| format!("line {line_no}: {e}"))?;
            let expected = fingerprint(&entry.model, &entry.messages, entry.temperature);
            if expected != entry.fingerprint {
                return Err(format!(
                    "line {line_no}: fingerprint {} does not match its request ({expected})",
                    entry.fingerprint
                ));
            }
            if !entry.usage.is_consistent() {
                return Err(format!("line {line_no}: total_tokens != prompt + completion"));
            }
            if entries.insert(entry.fingerprint.clone(), entry).is_some() {
                return Err(format!("line {line_no}: duplicate fingerprint"));
            }
        }
        Ok(Self { entries })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for entry in self.entries.values() {
            serde_json::to_writer(&mut w, entry)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        self.write_to(BufWriter::new(File::create(&tmp)?))?;
        std::fs::rename(tmp, path)
    }

    pub fn get(&self, fingerprint: &str) -> Option<&CassetteEntry> {
        self.entries.get(fingerprint)
    }

    /// Inserts or replaces the entry for its fingerprint.
    pub fn insert(&mut self, entry: CassetteEntry) {
        self.entries.insert(entry.fingerprint.clone(), entry);
    }

    pub fn merge(&mut self, other: Cassette) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CassetteEntry> {
        self.entries.values()
    }
}
