//! Retrieval agent: turns the linked entity's polarized neighborhood into two
//! LLM-written summaries, one of supporting (inclusion) knowledge and one of
//! ruling-out (exclusion) knowledge.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg_store::{KgError, KgStore, PolarityLexicon, RelationTriple};
use crate::linkage::LinkResult;
use crate::llm_gateway::{ChatMessage, ChatSettings, Gateway, GatewayError, TokenUsage};
use crate::prompts::{self, text, EMPTY_KNOWLEDGE_SENTINEL, TEMPLATE_VERSION};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("empty {0} summary returned for a non-empty relation list")]
    EmptySummary(&'static str),
    #[error("bundle cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBundle {
    pub disease: String,
    pub entity: String,
    pub entity_name: String,
    pub positive_summary: String,
    pub negative_summary: String,
    pub source_counts: SourceCounts,
    /// Prompts sent for each side; `None` when that side had no relations.
    pub positive_prompt: Option<String>,
    pub negative_prompt: Option<String>,
    pub usage: TokenUsage,
    pub template_version: String,
}

/// `(head name, predicate, tail name)`.
pub fn render_triple(store: &KgStore, t: &RelationTriple) -> String {
    let name = |id: &str| store.entity(id).map_or(id.to_string(), |e| e.name.clone());
    format!("({}, {}, {})", name(&t.head), t.predicate, name(&t.tail))
}

/// Builds the knowledge bundle for a linked entity without caching.
pub fn retrieve(
    gateway: &Gateway,
    store: &KgStore,
    link: &LinkResult,
    lexicon: &PolarityLexicon,
    cap: usize,
    chat: &ChatSettings,
) -> Result<KnowledgeBundle, RetrievalError> {
    let hood = store.neighborhood(&link.chosen, lexicon, cap)?;
    let entity_name = store
        .entity(&link.chosen)
        .map(|e| e.name.clone())
        .unwrap_or_else(|| link.chosen.clone());

    let summarize = |triples: &[RelationTriple], template: &str, side: &'static str| {
        if triples.is_empty() {
            return Ok((EMPTY_KNOWLEDGE_SENTINEL.to_string(), None, TokenUsage::default()));
        }
        let lines = triples
            .iter()
            .map(|t| render_triple(store, t))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = prompts::render(template, &[("entity", &entity_name), ("triples", &lines)]);
        let req = chat.request(vec![
            ChatMessage::system(text::retrieval_system()),
            ChatMessage::user(prompt.clone()),
        ]);
        let completion = gateway.complete(&req)?;
        let summary = completion.text.trim().to_string();
        if summary.is_empty() {
            return Err(RetrievalError::EmptySummary(side));
        }
        Ok((summary, Some(prompt), completion.usage))
    };

    let (pos, neg) = rayon::join(
        || summarize(&hood.positive, text::retrieval_positive(), "positive"),
        || summarize(&hood.negative, text::retrieval_negative(), "negative"),
    );
    let (positive_summary, positive_prompt, pos_usage) = pos?;
    let (negative_summary, negative_prompt, neg_usage) = neg?;

    Ok(KnowledgeBundle {
        disease: link.mention.clone(),
        entity: link.chosen.clone(),
        entity_name,
        positive_summary,
        negative_summary,
        source_counts: SourceCounts {
            positive: hood.positive.len(),
            negative: hood.negative.len(),
        },
        positive_prompt,
        negative_prompt,
        usage: pos_usage + neg_usage,
        template_version: TEMPLATE_VERSION.to_string(),
    })
}

/// Bundles keyed by entity, lexicon hash, cap and template version, held in
/// memory and optionally mirrored to one JSON file per key.
#[derive(Debug, Default)]
pub struct BundleCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<String, Arc<KnowledgeBundle>>>,
    // Serializes misses so concurrent callers never retrieve the same key twice.
    fill: Mutex<()>,
}

impl BundleCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn key(entity: &str, lexicon: &PolarityLexicon, cap: usize) -> String {
        let mut h = Sha256::new();
        for part in [entity, &lexicon.content_hash(), &cap.to_string(), TEMPLATE_VERSION] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn lookup(&self, key: &str) -> Result<Option<Arc<KnowledgeBundle>>, RetrievalError> {
        if let Some(b) = self.mem.read().expect("cache lock").get(key) {
            return Ok(Some(b.clone()));
        }
        let Some(path) = self.path_for(key).filter(|p| p.exists()) else {
            return Ok(None);
        };
        let raw = std::fs::read_to_string(&path).map_err(|e| RetrievalError::Cache(e.to_string()))?;
        let bundle: KnowledgeBundle = serde_json::from_str(&raw)
            .map_err(|e| RetrievalError::Cache(format!("{}: {e}", path.display())))?;
        let bundle = Arc::new(bundle);
        self.mem
            .write()
            .expect("cache lock")
            .insert(key.to_string(), bundle.clone());
        Ok(Some(bundle))
    }

    fn store(&self, key: &str, bundle: KnowledgeBundle) -> Result<Arc<KnowledgeBundle>, RetrievalError> {
        if let Some(path) = self.path_for(key) {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| RetrievalError::Cache(e.to_string()))?;
            }
            let mut json = serde_json::to_string_pretty(&bundle).expect("bundle serializes");
            json.push('\n');
            std::fs::write(&path, json).map_err(|e| RetrievalError::Cache(e.to_string()))?;
        }
        let bundle = Arc::new(bundle);
        self.mem
            .write()
            .expect("cache lock")
            .entry(key.to_string())
            .or_insert(bundle.clone());
        Ok(bundle)
    }

    /// Cached bundle for the link's entity, retrieving on a miss. A hit
    /// spends no tokens. The returned bundle carries the caller's mention.
    pub fn get_or_retrieve(
        &self,
        gateway: &Gateway,
        store: &KgStore,
        link: &LinkResult,
        lexicon: &PolarityLexicon,
        cap: usize,
        chat: &ChatSettings,
    ) -> Result<KnowledgeBundle, RetrievalError> {
        let key = Self::key(&link.chosen, lexicon, cap);
        let bundle = match self.lookup(&key)? {
            Some(b) => b,
            None => {
                let _guard = self.fill.lock().expect("cache fill lock");
                match self.lookup(&key)? {
                    Some(b) => b,
                    None => self.store(&key, retrieve(gateway, store, link, lexicon, cap, chat)?)?,
                }
            }
        };
        let mut out = (*bundle).clone();
        out.disease = link.mention.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg_store::IngestOptions;

    #[test]
    fn triple_rendering_uses_names() {
        let store = KgStore::ingest(
            "id\tname\tcategory\nP1\tPravastatin\tdrug\nD1\tCognitive dysfunction\tdisease\n".as_bytes(),
            "head\tpredicate\ttail\nP1\tNot treats\tD1\n".as_bytes(),
            &IngestOptions::default(),
        )
        .unwrap();
        let t = store.triples().next().unwrap();
        assert_eq!(
            render_triple(&store, &t),
            "(Pravastatin, Not treats, Cognitive dysfunction)"
        );
    }

    #[test]
    fn cache_key_components() {
        let lex = PolarityLexicon::default();
        let k = BundleCache::key("D1", &lex, 200);
        assert_eq!(k, BundleCache::key("D1", &lex, 200));
        assert_ne!(k, BundleCache::key("D2", &lex, 200));
        assert_ne!(k, BundleCache::key("D1", &lex, 100));
        let other = PolarityLexicon::new(["never"], Default::default());
        assert_ne!(k, BundleCache::key("D1", &other, 200));
    }
}
