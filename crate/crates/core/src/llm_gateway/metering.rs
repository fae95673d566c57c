use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TokenUsage;

#[derive(Debug, Error)]
pub enum MeterError {
    #[error("model `{0}` has no entry in the pricing table")]
    UnknownModel(String),
    #[error("pricing for `{0}` must be finite and non-negative")]
    InvalidPrice(String),
    #[error("pricing file {path}: {message}")]
    Load { path: String, message: String },
}

/// Currency per one million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_million: f64,
    pub output_per_million: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PricingTable {
    pub models: BTreeMap<String, ModelPrice>,
}

impl PricingTable {
    pub fn from_toml_str(raw: &str) -> Result<Self, MeterError> {
        let table: PricingTable = toml::from_str(raw).map_err(|e| MeterError::Load {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeterError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| MeterError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&raw).map_err(|e| match e {
            MeterError::Load { message, .. } => MeterError::Load {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    fn validate(&self) -> Result<(), MeterError> {
        for (model, p) in &self.models {
            let ok = |x: f64| x.is_finite() && x >= 0.0;
            if !ok(p.input_per_million) || !ok(p.output_per_million) {
                return Err(MeterError::InvalidPrice(model.clone()));
            }
        }
        Ok(())
    }

    pub fn price(&self, model: &str) -> Result<ModelPrice, MeterError> {
        self.models
            .get(model)
            .copied()
            .ok_or_else(|| MeterError::UnknownModel(model.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub token_cost: f64,
    pub wall_time_secs: f64,
}

/// Totals a usage stream and prices it. Token counts are summed as integers
/// before pricing, so the result does not depend on stream order.
pub fn meter<'a>(
    usages: impl IntoIterator<Item = &'a TokenUsage>,
    pricing: &PricingTable,
    model: &str,
    wall_time: Duration,
) -> Result<CostReport, MeterError> {
    let price = pricing.price(model)?;
    let total: TokenUsage = usages.into_iter().sum();
    Ok(CostReport {
        prompt_tokens: total.prompt_tokens,
        completion_tokens: total.completion_tokens,
        total_tokens: total.total_tokens,
        token_cost: total.prompt_tokens as f64 * price.input_per_million / 1e6
            + total.completion_tokens as f64 * price.output_per_million / 1e6,
        wall_time_secs: wall_time.as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pricing() -> PricingTable {
        PricingTable::from_toml_str(
            "[models.\"gpt-4o-mini\"]\ninput_per_million = 0.15\noutput_per_million = 0.60\n",
        )
        .unwrap()
    }

    #[test]
    fn empty_stream() {
        let r = meter([], &pricing(), "gpt-4o-mini", Duration::from_millis(1500)).unwrap();
        assert_eq!(r.total_tokens, 0);
        assert_eq!(r.token_cost, 0.0);
        assert_eq!(r.wall_time_secs, 1.5);
    }

    #[test]
    fn one_million_each_way() {
        let u = TokenUsage::new(1_000_000, 1_000_000);
        let r = meter([&u], &pricing(), "gpt-4o-mini", Duration::ZERO).unwrap();
        // Oracle: 1e6 * 0.15 / 1e6 + 1e6 * 0.60 / 1e6.
        assert!((r.token_cost - 0.75).abs() < 1e-12);
    }

    #[test]
    fn linear_in_usage() {
        let u = TokenUsage::new(1234, 567);
        let one = meter([&u], &pricing(), "gpt-4o-mini", Duration::ZERO).unwrap();
        let two = meter([&u, &u], &pricing(), "gpt-4o-mini", Duration::ZERO).unwrap();
        assert_eq!(two.token_cost, 2.0 * one.token_cost);
        assert_eq!(two.total_tokens, 2 * one.total_tokens);
    }

    #[test]
    fn unknown_model() {
        assert!(matches!(
            meter([], &pricing(), "nope", Duration::ZERO),
            Err(MeterError::UnknownModel(_))
        ));
    }

    #[test]
    fn negative_price_rejected() {
        assert!(PricingTable::from_toml_str(
            "[models.m]\ninput_per_million = -1.0\noutput_per_million = 0.0\n"
        )
        .is_err());
    }
}
