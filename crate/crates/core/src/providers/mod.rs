//! LLM and embedding provider interfaces.
//!
//! Two families of implementation live here: an OpenAI-compatible HTTP client
//! for real deployments, and deterministic stand-ins (token-hash embedder,
//! replay fixtures, oracle extractor) that let the whole pipeline run without
//! any model.

mod embed;
mod http;
mod oracle;
mod replay;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use embed::{Embedded, TokenHashEmbedder};
pub use http::{HttpConfig, OpenAiEmbedder, OpenAiLlm, RetryPolicy};
pub use oracle::{OracleExtractor, PLANT_TEMPLATE};
pub use replay::{RecordingLlm, ReplayLlm};

pub const DEFAULT_MAX_TOKENS: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system_prompt: String,
    pub user_content: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl LlmRequest {
    pub fn new(system_prompt: impl Into<String>, user_content: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_content: user_content.into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.system_prompt.trim().is_empty() || self.user_content.trim().is_empty() {
            return Err(Error::invalid("LLM request with empty prompt"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::invalid(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be positive"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical (sorted-key) JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

pub trait LlmProvider: Send + Sync {
    fn generate(&self, req: &LlmRequest) -> Result<Completion>;
}

impl<T: LlmProvider + ?Sized> LlmProvider for Arc<T> {
    fn generate(&self, req: &LlmRequest) -> Result<Completion> {
        (**self).generate(req)
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// One vector of length [`Embedder::dim`] per input, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        (**self).embed(texts)
    }
}

/// Rough word-count token estimate for providers that do not report usage.
pub(crate) fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Counters for cost accounting.
#[derive(Debug, Default)]
pub struct UsageMeter {
    calls: AtomicU64,
    failures: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    micros: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageSnapshot {
    pub calls: u64,
    pub failures: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub seconds: f64,
}

impl UsageSnapshot {
    pub fn cost(&self, usd_per_1k_prompt: f64, usd_per_1k_completion: f64) -> f64 {
        self.prompt_tokens as f64 / 1000.0 * usd_per_1k_prompt
            + self.completion_tokens as f64 / 1000.0 * usd_per_1k_completion
    }
}

impl UsageMeter {
    pub fn snapshot(&self) -> UsageSnapshot {
        UsageSnapshot {
            calls: self.calls.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
            seconds: self.micros.load(Ordering::Relaxed) as f64 / 1e6,
        }
    }
}

/// Wraps a provider with request validation, logging, and usage counters.
pub struct MeteredLlm<P> {
    inner: P,
    meter: Arc<UsageMeter>,
}

impl<P: LlmProvider> MeteredLlm<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            meter: Arc::default(),
        }
    }

    pub fn meter(&self) -> Arc<UsageMeter> {
        Arc::clone(&self.meter)
    }
}

impl<P: LlmProvider> LlmProvider for MeteredLlm<P> {
    fn generate(&self, req: &LlmRequest) -> Result<Completion> {
        req.validate()?;
        let started = Instant::now();
        let result = self.inner.generate(req);
        let micros = started.elapsed().as_micros() as u64;
        let m = &self.meter;
        m.calls.fetch_add(1, Ordering::Relaxed);
        m.micros.fetch_add(micros, Ordering::Relaxed);
        match &result {
            Ok(c) => {
                m.prompt_tokens.fetch_add(c.prompt_tokens, Ordering::Relaxed);
                m.completion_tokens.fetch_add(c.completion_tokens, Ordering::Relaxed);
                tracing::debug!(
                    hash = %req.hash(),
                    latency_ms = micros / 1000,
                    prompt_tokens = c.prompt_tokens,
                    completion_tokens = c.completion_tokens,
                    "llm call"
                );
            }
            Err(e) => {
                m.failures.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(hash = %req.hash(), error = %e, "llm call failed");
            }
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    impl LlmProvider for Echo {
        fn generate(&self, req: &LlmRequest) -> Result<Completion> {
            Ok(Completion {
                text: req.user_content.clone(),
                prompt_tokens: 3,
                completion_tokens: 2,
            })
        }
    }

    #[test]
    fn request_validation() {
        LlmRequest::new("sys", "user").validate().unwrap();
        assert!(LlmRequest::new("", "user").validate().is_err());
        let mut r = LlmRequest::new("sys", "user");
        r.temperature = 2.5;
        assert!(r.validate().is_err());
        r.temperature = 1.0;
        r.max_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = LlmRequest::new("sys", "user");
        assert_eq!(a.hash(), LlmRequest::new("sys", "user").hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.temperature = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn meter_counts_calls_and_tokens() {
        let llm = MeteredLlm::new(Echo);
        llm.generate(&LlmRequest::new("s", "u")).unwrap();
        llm.generate(&LlmRequest::new("s", "u")).unwrap();
        assert!(llm.generate(&LlmRequest::new("", "u")).is_err());
        let s = llm.meter().snapshot();
        assert_eq!((s.calls, s.prompt_tokens, s.completion_tokens), (2, 6, 4));
        assert!((s.cost(1.0, 2.0) - (0.006 + 0.008)).abs() < 1e-12);
    }
}
