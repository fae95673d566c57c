//! Entity-name embeddings and exact cosine top-k candidate generation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg_store::KgStore;
use crate::transport::{JsonClient, RetryPolicy, TransportError};

pub const DEFAULT_DIMENSION: usize = 768;
pub const DEFAULT_CANDIDATE_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("non-finite component at {0}")]
    NonFinite(usize),
    #[error("embedding index is empty")]
    EmptyIndex,
    #[error("entity `{0}` embeds to the zero vector")]
    ZeroEntityVector(String),
    #[error("candidate count must be at least 1")]
    ZeroCandidates,
    #[error("embedding provider transport: {0}")]
    Transport(#[from] TransportError),
    #[error("embedding provider returned {got} vectors for {want} inputs")]
    CountMismatch { want: usize, got: usize },
    #[error("malformed provider response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn l2_norm(a: &[f32]) -> f64 {
    a.iter().map(|x| *x as f64 * *x as f64).sum::<f64>().sqrt()
}

fn clamped_score(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(0.0, 1.0)
}

/// Cosine similarity clamped to `[0, 1]`; anti-correlated pairs score 0.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let (na, nb) = (l2_norm(&a.0), l2_norm(&b.0));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(clamped_score(dot(&a.0, &b.0), na, nb))
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop().ok_or(EmbeddingError::CountMismatch { want: 1, got: 0 })
    }
}

/// Deterministic feature-hashing embedding for offline runs.
///
/// The input is trimmed and lowercased, then split into words on
/// non-alphanumeric characters. Each word contributes the feature
/// `"w:" + word` with weight 1.0 and each character trigram of
/// `"#" + word + "#"` contributes `"t:" + trigram` with weight 0.5. A feature
/// is hashed with 64-bit FNV-1a over `seed.to_le_bytes()` followed by the
/// feature's UTF-8 bytes; it lands on index `hash % dimension` with sign `-`
/// when bit 63 is set. If nothing was added, or everything cancelled, the
/// feature `"raw:" + text` is added with weight 1.0.
#[derive(Debug, Clone)]
pub struct HashEmbeddingProvider {
    seed: u64,
    dimension: usize,
}

impl HashEmbeddingProvider {
    pub fn new(seed: u64, dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { seed, dimension }
    }

    fn add_feature(&self, v: &mut [f32], feature: &str, weight: f32) {
        let h = fnv1a64(&self.seed.to_le_bytes(), feature.as_bytes());
        let idx = (h % self.dimension as u64) as usize;
        if h >> 63 == 1 {
            v[idx] -= weight;
        } else {
            v[idx] += weight;
        }
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let norm = text.trim().to_lowercase();
        if norm.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut v = vec![0f32; self.dimension];
        for word in norm.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            self.add_feature(&mut v, &format!("w:{word}"), 1.0);
            let padded: Vec<char> = format!("#{word}#").chars().collect();
            for tri in padded.windows(3) {
                let tri: String = tri.iter().collect();
                self.add_feature(&mut v, &format!("t:{tri}"), 0.5);
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            self.add_feature(&mut v, &format!("raw:{norm}"), 1.0);
        }
        EmbeddingVector::new(v)
    }
}

fn fnv1a64(prefix: &[u8], data: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    prefix.iter().chain(data).fold(OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(PRIME))
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Client for an HTTP embeddings endpoint (`input` in, `data[i].embedding` out).
pub struct HttpEmbeddingProvider {
    client: JsonClient,
    url: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
}

impl HttpEmbeddingProvider {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dimension: usize,
        retry: RetryPolicy,
    ) -> Result<Self, EmbeddingError> {
        Ok(Self {
            client: JsonClient::new(retry)?,
            url: url.into(),
            model: model.into(),
            api_key,
            dimension,
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyText);
        }
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let resp = self.client.post_json(&self.url, self.api_key.as_deref(), &body)?;
        let data = resp
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| EmbeddingError::Malformed("missing `data` array".into()))?;
        let mut rows: Vec<(usize, EmbeddingVector)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(|i| i.as_u64()).map_or(pos, |i| i as usize);
            let values = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| EmbeddingError::Malformed(format!("data[{pos}].embedding missing")))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| EmbeddingError::Malformed(format!("data[{pos}].embedding not numeric")))?;
            if values.len() != self.dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    left: self.dimension,
                    right: values.len(),
                });
            }
            rows.push((index, EmbeddingVector::new(values)?));
        }
        if rows.len() != texts.len() {
            return Err(EmbeddingError::CountMismatch {
                want: texts.len(),
                got: rows.len(),
            });
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkCandidate {
    pub entity: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkerConfig {
    pub candidate_count: usize,
    pub provider: String,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        Self {
            candidate_count: DEFAULT_CANDIDATE_COUNT,
            provider: "hash".into(),
        }
    }
}

/// Exhaustive-scan cosine index over entity-name embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dimension: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    norms: Vec<f64>,
}

const EMBED_BATCH: usize = 256;

impl EmbeddingIndex {
    pub fn build(store: &KgStore, provider: &dyn EmbeddingProvider) -> Result<Self, EmbeddingError> {
        let entities: Vec<_> = store.entities().collect();
        let mut entries = Vec::with_capacity(entities.len());
        for chunk in entities.chunks(EMBED_BATCH) {
            let names: Vec<&str> = chunk.iter().map(|e| e.name.as_str()).collect();
            let vectors = provider.embed_batch(&names)?;
            if vectors.len() != chunk.len() {
                return Err(EmbeddingError::CountMismatch {
                    want: chunk.len(),
                    got: vectors.len(),
                });
            }
            entries.extend(chunk.iter().map(|e| e.id.clone()).zip(vectors));
        }
        Self::from_vectors(provider.dimension(), entries)
    }

    pub fn from_vectors(
        dimension: usize,
        entries: impl IntoIterator<Item = (String, EmbeddingVector)>,
    ) -> Result<Self, EmbeddingError> {
        let mut index = Self {
            dimension,
            ids: Vec::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
        };
        for (id, v) in entries {
            if v.dimension() != dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    left: dimension,
                    right: v.dimension(),
                });
            }
            let norm = l2_norm(v.as_slice());
            if norm == 0.0 {
                return Err(EmbeddingError::ZeroEntityVector(id));
            }
            index.vectors.extend_from_slice(v.as_slice());
            index.norms.push(norm);
            index.ids.push(id);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Embeds `mention` and returns its top candidates.
    pub fn top_candidates(
        &self,
        provider: &dyn EmbeddingProvider,
        mention: &str,
        cfg: &LinkerConfig,
    ) -> Result<Vec<LinkCandidate>, EmbeddingError> {
        if self.is_empty() {
            return Err(EmbeddingError::EmptyIndex);
        }
        let query = provider.embed(mention)?;
        self.nearest(&query, cfg.candidate_count)
    }

    /// The `min(k, len)` best entities, by score descending then id ascending.
    pub fn nearest(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<LinkCandidate>, EmbeddingError> {
        if k == 0 {
            return Err(EmbeddingError::ZeroCandidates);
        }
        if self.is_empty() {
            return Err(EmbeddingError::EmptyIndex);
        }
        if query.dimension() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                left: self.dimension,
                right: query.dimension(),
            });
        }
        let qn = l2_norm(query.as_slice());
        if qn == 0.0 {
            return Err(EmbeddingError::ZeroVector);
        }
        // Sorted best-first; only the top k are ever kept.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let better = |a: &(f64, usize), b: &(f64, usize), ids: &[String]| {
            b.0.total_cmp(&a.0).then_with(|| ids[a.1].cmp(&ids[b.1]))
        };
        for (i, row) in self.vectors.chunks_exact(self.dimension).enumerate() {
            let score = clamped_score(dot(query.as_slice(), row), qn, self.norms[i]);
            let cand = (score, i);
            if best.len() == k && better(&cand, &best[k - 1], &self.ids).is_ge() {
                continue;
            }
            let pos = best.partition_point(|b| better(b, &cand, &self.ids).is_lt());
            best.insert(pos, cand);
            best.truncate(k);
        }
        Ok(best
            .into_iter()
            .map(|(score, i)| LinkCandidate {
                entity: self.ids[i].clone(),
                score,
            })
            .collect())
    }
}
