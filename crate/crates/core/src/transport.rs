//! Blocking JSON-over-HTTP with bounded exponential backoff, shared by the
//! chat-completion backend and the embedding provider.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            timeout_secs: 120,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Failure after the retry budget is spent, or a non-retryable status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub message: String,
    pub status: Option<u16>,
    pub attempts: u32,
    pub retryable: bool,
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            Some(s) => write!(f, "HTTP {s} after {} attempt(s): {}", self.attempts, self.message),
            None => write!(f, "{} (after {} attempt(s))", self.message, self.attempts),
        }
    }
}

impl std::error::Error for TransportError {}

/// 429 and 5xx are transient; every other 4xx is final.
pub fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

pub struct JsonClient {
    http: reqwest::blocking::Client,
    policy: RetryPolicy,
}

impl JsonClient {
    pub fn new(policy: RetryPolicy) -> Result<Self, TransportError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(policy.timeout_secs))
            .build()
            .map_err(|e| TransportError {
                message: format!("building HTTP client: {e}"),
                status: None,
                attempts: 0,
                retryable: false,
            })?;
        Ok(Self { http, policy })
    }

    /// POSTs `body` and returns the parsed JSON response of the first 2xx.
    pub fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, TransportError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let mut req = self.http.post(url).json(body);
            if let Some(key) = bearer {
                req = req.bearer_auth(key);
            }
            let (err, retry_after) = match req.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let retry_after = resp
                        .headers()
                        .get(reqwest::header::RETRY_AFTER)
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<u64>().ok())
                        .map(Duration::from_secs);
                    let text = resp.text().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text).map_err(|e| TransportError {
                            message: format!("invalid JSON response: {e}"),
                            status: Some(status),
                            attempts: attempt,
                            retryable: false,
                        });
                    }
                    let err = TransportError {
                        message: truncate(&text, 512),
                        status: Some(status),
                        attempts: attempt,
                        retryable: is_retryable_status(status),
                    };
                    (err, retry_after)
                }
                Err(e) => (
                    TransportError {
                        message: e.to_string(),
                        status: None,
                        attempts: attempt,
                        retryable: true,
                    },
                    None,
                ),
            };
            if !err.retryable || attempt > self.policy.max_retries {
                return Err(err);
            }
            let delay = retry_after
                .map(|d| d.min(Duration::from_millis(self.policy.max_delay_ms)))
                .unwrap_or_else(|| self.policy.backoff(attempt - 1));
            tracing::warn!(url, attempt, status = err.status, delay_ms = delay.as_millis() as u64, "retrying request");
            std::thread::sleep(delay);
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            base_delay_ms: 100,
            max_delay_ms: 1_000,
            ..Default::default()
        };
        let ms: Vec<u128> = (0..6).map(|a| p.backoff(a).as_millis()).collect();
        assert_eq!(ms, vec![100, 200, 400, 800, 1000, 1000]);
        assert_eq!(p.backoff(200).as_millis(), 1000);
    }

    #[test]
    fn status_classes() {
        assert!(is_retryable_status(429));
        assert!(is_retryable_status(503));
        assert!(!is_retryable_status(400));
        assert!(!is_retryable_status(401));
        assert!(!is_retryable_status(404));
    }
}
