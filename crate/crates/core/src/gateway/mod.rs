//! LLM access: a pluggable backend behind a content-addressed response cache.
//!
//! Every completion goes through [`Gateway::complete`]. A cache hit never
//! touches the backend; a miss calls the backend and appends the answer to the
//! cache before returning it. With no backend configured the gateway is
//! replay-only and a miss is an error.

mod cache;
mod http;
mod mock;
mod retry;

pub use cache::{AuditLog, ResponseCache};
pub use http::{HttpBackend, HttpConfig, API_KEY_ENV};
pub use mock::{
    ranking_with_ground_truth_at, MockBackend, MockScript, Pattern, Reply, Rule, ScriptReply,
    ScriptRule, CANDIDATE_LINE_PREFIX,
};
pub use retry::{AttemptError, RetryPolicy};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default output token budget. The fused prompts are long; 1024 tokens
/// comfortably covers a 20-index answer and a rewritten prompt.
pub const DEFAULT_MAX_OUTPUT: u32 = 1024;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("cache miss in replay mode for digest(s): {}", .digests.join(", "))]
    CacheMiss { digests: Vec<String> },
    #[error("mock script has no rule for prompt: {excerpt}")]
    ScriptMiss { excerpt: String },
    #[error("invalid mock script: {0}")]
    InvalidScript(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("cache file {path}: line {line}: {reason}")]
    CorruptCache {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("digest {digest} maps to two different responses")]
    DigestCollision { digest: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt_text: String,
    pub temperature: f64,
    pub max_output: u32,
    pub tag: String,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompt_text: impl Into<String>) -> Self {
        CompletionRequest {
            model: model.into(),
            prompt_text: prompt_text.into(),
            temperature: 0.0,
            max_output: DEFAULT_MAX_OUTPUT,
            tag: String::new(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        assert!(temperature >= 0.0, "temperature must be non-negative");
        self.temperature = temperature;
        self
    }

    pub fn with_max_output(mut self, max_output: u32) -> Self {
        self.max_output = max_output;
        self
    }

    /// Cache key. `max_output` and `tag` are deliberately not part of it.
    pub fn digest(&self) -> String {
        request_digest(&self.model, &self.prompt_text, self.temperature)
    }
}

/// SHA-256 over the JSON encoding of `(model, temperature, prompt_text)`.
pub fn request_digest(model: &str, prompt_text: &str, temperature: f64) -> String {
    let canonical = serde_json::to_string(&(model, temperature, prompt_text))
        .expect("tuple of strings and a float always serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Content digest of a response, used in outcome logs.
pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request_digest: String,
    pub response_text: String,
    pub latency_ms: u64,
    pub timestamp: DateTime<Utc>,
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
}

pub struct Gateway {
    backend: Option<Arc<dyn Backend>>,
    cache: Option<ResponseCache>,
    audit: Option<AuditLog>,
    pool: rayon::ThreadPool,
    parallelism: usize,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

#[derive(Default)]
pub struct GatewayBuilder {
    backend: Option<Arc<dyn Backend>>,
    cache: Option<ResponseCache>,
    audit: Option<AuditLog>,
    parallelism: Option<usize>,
}

impl GatewayBuilder {
    pub fn backend(mut self, backend: impl Backend + 'static) -> Self {
        self.backend = Some(Arc::new(backend));
        self
    }

    pub fn shared_backend(mut self, backend: Arc<dyn Backend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn parallelism(mut self, n: usize) -> Self {
        self.parallelism = Some(n.max(1));
        self
    }

    pub fn build(self) -> Result<Gateway, GatewayError> {
        let parallelism = self.parallelism.unwrap_or(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(Gateway {
            backend: self.backend,
            cache: self.cache,
            audit: self.audit,
            pool,
            parallelism,
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        })
    }
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder::default()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let digest = request.digest();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&digest)) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            log::trace!("cache hit {digest} [{}]", request.tag);
            if let Some(audit) = &self.audit {
                audit.append(&hit)?;
            }
            return non_empty(hit.response_text);
        }
        let Some(backend) = &self.backend else {
            return Err(GatewayError::CacheMiss {
                digests: vec![digest],
            });
        };
        let started = Instant::now();
        self.backend_calls.fetch_add(1, Ordering::Relaxed);
        let text = backend.complete(request)?;
        let record = CompletionRecord {
            request_digest: digest,
            response_text: text,
            latency_ms: started.elapsed().as_millis() as u64,
            timestamp: Utc::now(),
        };
        if let Some(cache) = &self.cache {
            cache.insert(record.clone())?;
        }
        if let Some(audit) = &self.audit {
            audit.append(&record)?;
        }
        non_empty(record.response_text)
    }

    /// Applies `f` to every item using at most `parallelism` workers.
    /// Results keep the input order.
    pub fn map_bounded<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        if self.parallelism == 1 {
            return items.iter().map(f).collect();
        }
        use rayon::prelude::*;
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }

    pub fn is_replay_only(&self) -> bool {
        self.backend.is_none()
    }
}

fn non_empty(text: String) -> Result<String, GatewayError> {
    if text.trim().is_empty() {
        Err(GatewayError::EmptyResponse)
    } else {
        Ok(text)
    }
}
