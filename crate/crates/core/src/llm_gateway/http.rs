use std::time::Instant;

use serde_json::{json, Value};

use super::{Completion, CompletionBackend, CompletionRequest, GatewayError, TokenUsage};
use crate::transport::{JsonClient, RetryPolicy};

/// Live backend for a `/chat/completions` endpoint.
pub struct HttpChatBackend {
    client: JsonClient,
    url: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    /// `base_url` is the API root, e.g. `https://api.openai.com/v1`.
    pub fn new(base_url: &str, api_key: Option<String>, retry: RetryPolicy) -> Result<Self, GatewayError> {
        Ok(Self {
            client: JsonClient::new(retry)?,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
        })
    }
}

impl CompletionBackend for HttpChatBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        let body = json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let started = Instant::now();
        let resp = self.client.post_json(&self.url, self.api_key.as_deref(), &body)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        parse_chat_response(&resp, latency_ms)
    }
}

pub(crate) fn parse_chat_response(resp: &Value, latency_ms: u64) -> Result<Completion, GatewayError> {
    let text = resp
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Malformed("missing choices[0].message.content".into()))?
        .to_string();
    let count = |field: &str| resp.pointer(&format!("/usage/{field}")).and_then(Value::as_u64);
    let usage = match (count("prompt_tokens"), count("completion_tokens")) {
        (Some(p), Some(c)) => TokenUsage::new(p, c),
        _ => return Err(GatewayError::Malformed("missing usage token counts".into())),
    };
    Ok(Completion {
        text,
        usage,
        latency_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_wire_shape() {
        let c = parse_chat_response(
            &json!({
                "choices": [{"index": 0, "message": {"role": "assistant", "content": "YES"}}],
                "usage": {"prompt_tokens": 12, "completion_tokens": 1, "total_tokens": 13}
            }),
            4,
        )
        .unwrap();
        assert_eq!(c.text, "YES");
        assert_eq!(c.usage, TokenUsage::new(12, 1));
    }

    #[test]
    fn rejects_missing_fields() {
        assert!(parse_chat_response(&json!({"choices": []}), 0).is_err());
        assert!(parse_chat_response(
            &json!({"choices": [{"message": {"content": "x"}}]}),
            0
        )
        .is_err());
    }
}
