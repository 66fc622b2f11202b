//! OpenAI-compatible chat-completions and embeddings client.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{estimate_tokens, Completion, Embedder, LlmProvider, LlmRequest};
use crate::error::{Error, Result};
use crate::par::map_bounded;

pub const ENV_API_KEY: &str = "PAIRSEM_API_KEY";
pub const ENV_API_BASE: &str = "PAIRSEM_API_BASE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub api_base: String,
    pub api_key: Option<String>,
    pub chat_model: String,
    pub embedding_model: String,
    pub timeout_secs: u64,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            api_base: "https://api.openai.com/v1".to_string(),
            api_key: None,
            chat_model: "gpt-4.1-mini".to_string(),
            embedding_model: "text-embedding-3-small".to_string(),
            timeout_secs: 120,
            parallelism: 8,
            retry: RetryPolicy::default(),
        }
    }
}

impl HttpConfig {
    /// Fills `api_base` / `api_key` from the environment when set.
    pub fn with_env(mut self) -> Self {
        if let Ok(base) = std::env::var(ENV_API_BASE) {
            self.api_base = base;
        }
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            self.api_key = Some(key);
        }
        self
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

struct HttpCore {
    agent: ureq::Agent,
    cfg: HttpConfig,
    permits: Semaphore,
}

impl HttpCore {
    fn new(cfg: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .build()
            .into();
        Self {
            agent,
            permits: Semaphore::new(cfg.parallelism),
            cfg,
        }
    }

    /// POSTs JSON, retrying transport failures, 429, and 5xx with
    /// exponential backoff. Other statuses surface immediately with body.
    fn post_json(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{}", self.cfg.api_base.trim_end_matches('/'), path);
        let attempts = self.cfg.retry.max_attempts.max(1);
        let mut last_err = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.retry.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let _permit = self.permits.acquire();
            let mut req = self.agent.post(&url).header("Content-Type", "application/json");
            if let Some(key) = &self.cfg.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            let mut resp = match req.send_json(body) {
                Ok(r) => r,
                Err(e) => {
                    last_err = e.to_string();
                    tracing::warn!(%url, attempt, error = %last_err, "request failed");
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = match resp.body_mut().read_to_string() {
                Ok(t) => t,
                Err(e) => {
                    last_err = e.to_string();
                    continue;
                }
            };
            if status == 429 || status >= 500 {
                last_err = format!("status {status}: {text}");
                tracing::warn!(%url, attempt, status, "retryable status");
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(Error::Provider { status, body: text });
            }
            return serde_json::from_str(&text).map_err(|e| Error::Provider {
                status,
                body: format!("unparseable response ({e}): {text}"),
            });
        }
        Err(Error::Transport {
            attempts,
            message: last_err,
        })
    }
}

pub struct OpenAiLlm {
    core: HttpCore,
}

impl OpenAiLlm {
    pub fn new(cfg: HttpConfig) -> Self {
        Self {
            core: HttpCore::new(cfg),
        }
    }
}

impl LlmProvider for OpenAiLlm {
    fn generate(&self, req: &LlmRequest) -> Result<Completion> {
        let body = json!({
            "model": self.core.cfg.chat_model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_content},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let resp = self.core.post_json("chat/completions", &body)?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Provider {
                status: 200,
                body: format!("missing choices[0].message.content: {resp}"),
            })?
            .to_string();
        let usage = |field: &str, fallback: u64| {
            resp.pointer(&format!("/usage/{field}"))
                .and_then(Value::as_u64)
                .unwrap_or(fallback)
        };
        Ok(Completion {
            prompt_tokens: usage(
                "prompt_tokens",
                estimate_tokens(&req.system_prompt) + estimate_tokens(&req.user_content),
            ),
            completion_tokens: usage("completion_tokens", estimate_tokens(&text)),
            text,
        })
    }
}

pub struct OpenAiEmbedder {
    core: HttpCore,
    dim: usize,
    batch_size: usize,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

impl OpenAiEmbedder {
    pub fn new(cfg: HttpConfig, dim: usize, batch_size: usize) -> Result<Self> {
        if dim == 0 || batch_size == 0 {
            return Err(Error::invalid("embedding dim and batch size must be positive"));
        }
        Ok(Self {
            core: HttpCore::new(cfg),
            dim,
            batch_size,
        })
    }

    fn embed_batch(&self, batch: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({"model": self.core.cfg.embedding_model, "input": batch});
        let resp = self.core.post_json("embeddings", &body)?;
        let data = resp.get("data").cloned().ok_or_else(|| Error::Provider {
            status: 200,
            body: format!("missing data field: {resp}"),
        })?;
        let mut items: Vec<EmbeddingItem> = serde_json::from_value(data).map_err(|e| Error::Provider {
            status: 200,
            body: format!("bad embedding payload: {e}"),
        })?;
        items.sort_by_key(|i| i.index);
        if items.len() != batch.len() || items.iter().enumerate().any(|(i, it)| it.index != i) {
            return Err(Error::Provider {
                status: 200,
                body: format!("expected {} embeddings, got {}", batch.len(), items.len()),
            });
        }
        items
            .into_iter()
            .map(|it| {
                if it.embedding.len() != self.dim {
                    Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: it.embedding.len(),
                    })
                } else {
                    Ok(it.embedding)
                }
            })
            .collect()
    }
}

impl Embedder for OpenAiEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Err(Error::invalid("embed called with no texts"));
        }
        let batches: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        let results = map_bounded(&batches, self.core.cfg.parallelism, |b| self.embed_batch(b));
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}
