//! Knowledge-graph-enhanced zero-shot diagnosis prediction with LLM agents.
//!
//! A disease mention is linked to a knowledge-graph entity, the entity's
//! relations are split by polarity and summarized into supporting and
//! ruling-out guidance, and a two-stage conversation turns a patient visit
//! plus that guidance into a YES/NO prediction. Baseline prompting
//! strategies, cohort handling, scoring and cost metering sit alongside.
//!
//! Every LLM call goes through [`llm_gateway::Gateway`], which can record
//! responses into a cassette and replay them offline.

pub mod cohort;
pub mod config;
pub mod embedding;
pub mod eval;
pub mod kg_store;
pub mod linkage;
pub mod llm_gateway;
pub mod pipeline;
pub mod prediction;
pub mod prompts;
pub mod retrieval;
pub mod transport;
