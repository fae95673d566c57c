//! Wires the store, embedding index, gateway and agents from one config.

use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use thiserror::Error;

use crate::cohort::{Cohort, CohortError};
use crate::config::{ChatBackendKind, ConfigError, EmbeddingProviderKind, PipelineConfig};
use crate::embedding::{
    EmbeddingError, EmbeddingIndex, EmbeddingProvider, HashEmbeddingProvider, HttpEmbeddingProvider,
    LinkerConfig,
};
use crate::kg_store::{IngestOptions, KgError, KgStore, PolarityLexicon};
use crate::linkage::{self, LinkError, LinkResult};
use crate::llm_gateway::simulated::SimulatedBackend;
use crate::llm_gateway::{
    Cassette, CompletionBackend, Gateway, GatewayError, GatewayMode, HttpChatBackend, MeterError,
    PricingTable, RateLimiter,
};
use crate::prediction::{self, PatientVisit, PredictionConfig, PredictionError, PredictionOutcome, Strategy};
use crate::retrieval::{BundleCache, KnowledgeBundle, RetrievalError};
use crate::transport::RetryPolicy;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Meter(#[from] MeterError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub struct Pipeline {
    config: PipelineConfig,
    store: KgStore,
    lexicon: PolarityLexicon,
    provider: Box<dyn EmbeddingProvider>,
    index: OnceLock<EmbeddingIndex>,
    gateway: Gateway,
    pricing: PricingTable,
    cache: BundleCache,
    pool: rayon::ThreadPool,
    prediction: PredictionConfig,
}

/// Gateway for the configured mode. Replay loads the cassette; record
/// extends it when it already exists.
pub fn build_gateway(cfg: &PipelineConfig) -> Result<Gateway, PipelineError> {
    let limiter = || RateLimiter::new(cfg.llm.requests_per_minute, cfg.llm.max_in_flight);
    let backend = || -> Result<Box<dyn CompletionBackend>, PipelineError> {
        Ok(match cfg.llm.backend {
            ChatBackendKind::Http => Box::new(HttpChatBackend::new(
                &cfg.base_url(),
                cfg.api_key(),
                RetryPolicy::default(),
            )?),
            ChatBackendKind::Simulated => Box::new(SimulatedBackend::new()),
        })
    };
    Ok(match cfg.llm.mode {
        GatewayMode::Replay => {
            let path = cfg
                .llm
                .cassette
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("replay mode needs llm.cassette".into()))?;
            Gateway::replay(Cassette::load(path)?)
        }
        GatewayMode::Record => {
            let path = cfg.llm.cassette.clone();
            let existing = match &path {
                Some(p) if p.exists() => Cassette::load(p)?,
                _ => Cassette::default(),
            };
            Gateway::record(backend()?, existing, path, limiter())
        }
        GatewayMode::Live => Gateway::live(backend()?, limiter()),
    })
}

impl Pipeline {
    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::new(PipelineConfig::load(path)?)
    }

    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let gateway = build_gateway(&config)?;
        Self::with_gateway(config, gateway)
    }

    /// Builds everything except the gateway, which the caller supplies.
    pub fn with_gateway(config: PipelineConfig, gateway: Gateway) -> Result<Self, PipelineError> {
        let opts = IngestOptions {
            categories: config.kg.categories.clone(),
            skip_malformed: config.kg.skip_malformed,
            memory_budget_bytes: config.kg.memory_budget_bytes,
        };
        let store = KgStore::ingest_files(&config.kg.entities, &config.kg.triples, &opts)?;
        let lexicon = match &config.kg.lexicon {
            Some(p) => PolarityLexicon::from_toml_file(p)?,
            None => PolarityLexicon::default(),
        };
        let provider: Box<dyn EmbeddingProvider> = match config.embedding.provider {
            EmbeddingProviderKind::Hash => Box::new(HashEmbeddingProvider::new(
                config.seed.wrapping_add(config.embedding.seed_offset),
                config.embedding.dimension,
            )),
            EmbeddingProviderKind::Http => Box::new(HttpEmbeddingProvider::new(
                config.embedding.url.clone().unwrap_or_default(),
                config.embedding.model.clone().unwrap_or_default(),
                config.api_key(),
                config.embedding.dimension,
                RetryPolicy::default(),
            )?),
        };
        let pricing = PricingTable::load(&config.llm.pricing)?;
        let cache = match &config.bundle_cache {
            Some(dir) => BundleCache::with_dir(dir),
            None => BundleCache::in_memory(),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| PipelineError::Pool(e.to_string()))?;
        let prediction = PredictionConfig {
            chat: config.chat(),
            fallback_verdict: config.llm.fallback_verdict,
        };
        let stats = store.stats();
        tracing::info!(
            entities = stats.entities,
            triples = stats.triples,
            dangling = stats.dangling_triples,
            mode = ?gateway.mode(),
            "pipeline ready"
        );
        Ok(Self {
            config,
            store,
            lexicon,
            provider,
            index: OnceLock::new(),
            gateway,
            pricing,
            cache,
            pool,
            prediction,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &KgStore {
        &self.store
    }

    pub fn lexicon(&self) -> &PolarityLexicon {
        &self.lexicon
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn pricing(&self) -> &PricingTable {
        &self.pricing
    }

    pub fn pool(&self) -> &rayon::ThreadPool {
        &self.pool
    }

    pub fn prediction_config(&self) -> &PredictionConfig {
        &self.prediction
    }

    /// Entity-name index, built on first use.
    pub fn index(&self) -> Result<&EmbeddingIndex, PipelineError> {
        if let Some(index) = self.index.get() {
            return Ok(index);
        }
        let built = EmbeddingIndex::build(&self.store, self.provider.as_ref())?;
        Ok(self.index.get_or_init(|| built))
    }

    pub fn link(&self, mention: &str) -> Result<LinkResult, PipelineError> {
        let linker = LinkerConfig {
            candidate_count: self.config.embedding.candidate_count,
            provider: format!("{:?}", self.config.embedding.provider).to_lowercase(),
        };
        Ok(linkage::link(
            &self.gateway,
            &self.store,
            self.index()?,
            self.provider.as_ref(),
            mention,
            &linker,
            &self.config.chat(),
        )?)
    }

    /// Links the mention and returns its (possibly cached) knowledge bundle.
    pub fn knowledge(&self, mention: &str) -> Result<(LinkResult, KnowledgeBundle), PipelineError> {
        let link = self.link(mention)?;
        let bundle = self.cache.get_or_retrieve(
            &self.gateway,
            &self.store,
            &link,
            &self.lexicon,
            self.config.kg.neighborhood_cap,
            &self.config.chat(),
        )?;
        Ok((link, bundle))
    }

    pub fn predict(
        &self,
        visit: &PatientVisit,
        disease: &str,
        bundle: Option<&KnowledgeBundle>,
        strategy: Strategy,
    ) -> Result<PredictionOutcome, PipelineError> {
        Ok(prediction::predict(
            &self.gateway,
            visit,
            disease,
            bundle,
            strategy,
            &self.prediction,
        )?)
    }

    /// Predicts every visit on the pipeline's pool, in cohort order.
    pub fn predict_cohort(
        &self,
        cohort: &Cohort,
        disease: &str,
        bundle: Option<&KnowledgeBundle>,
        strategy: Strategy,
    ) -> Result<Vec<PredictionOutcome>, PipelineError> {
        self.pool.install(|| {
            cohort
                .visits
                .par_iter()
                .map(|v| self.predict(v, disease, bundle, strategy))
                .collect()
        })
    }

    /// Saves the cassette when recording.
    pub fn persist(&self) -> Result<(), PipelineError> {
        Ok(self.gateway.persist()?)
    }
}
