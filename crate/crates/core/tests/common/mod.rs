#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Mutex;

use kerap_core::llm_gateway::{
    Completion, CompletionBackend, CompletionRequest, Gateway, GatewayError, RateLimiter, TokenUsage,
};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Answers from a fixed script, in order, and remembers every request.
pub struct Scripted {
    answers: Mutex<Vec<String>>,
    pub seen: Mutex<Vec<CompletionRequest>>,
}

impl Scripted {
    pub fn new(answers: &[&str]) -> Self {
        Self {
            answers: Mutex::new(answers.iter().rev().map(|s| s.to_string()).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl CompletionBackend for &'static Scripted {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        self.seen.lock().unwrap().push(req.clone());
        let text = self
            .answers
            .lock()
            .unwrap()
            .pop()
            .ok_or_else(|| GatewayError::Backend("script exhausted".into()))?;
        Ok(Completion {
            usage: TokenUsage::new(10, text.len() as u64),
            text,
            latency_ms: 5,
        })
    }
}

/// Live gateway over a leaked script, so the script can be inspected afterwards.
pub fn scripted(answers: &[&str]) -> (&'static Scripted, Gateway) {
    let s: &'static Scripted = Box::leak(Box::new(Scripted::new(answers)));
    (s, Gateway::live(Box::new(s), RateLimiter::unlimited()))
}
