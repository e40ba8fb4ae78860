//! Backend-agnostic model calls: the request/reply contract, an in-flight
//! limiter, answer alignment onto the closed answer set, and three
//! backends (scene-graph oracle, scripted replay, HTTP chat server).

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::AnswerVocabulary;
use crate::embed::{cosine_similarity, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::normalize::normalize_answer;
use crate::prompt::PromptContext;

pub mod http;
pub mod oracle;
pub mod scripted;

pub use http::HttpBackend;
pub use oracle::{OracleBackend, OracleBackendConfig};
pub use scripted::ScriptedBackend;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_IN_FLIGHT_LIMIT: usize = 8;

/// One model call: the assembled context plus the question the reply is
/// expected to answer. The target always equals the context's query
/// question; the constructor keeps the two in lockstep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub context: PromptContext,
    pub target_question: String,
    pub request_id: String,
    #[serde(skip, default = "default_timeout")]
    pub timeout: Duration,
}

fn default_timeout() -> Duration {
    DEFAULT_TIMEOUT
}

impl ModelRequest {
    pub fn new(context: PromptContext, request_id: impl Into<String>) -> Self {
        let target_question = context.query.question.clone();
        ModelRequest {
            context,
            target_question,
            request_id: request_id.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// For requests built by hand or deserialized.
    pub fn validate(&self) -> Result<()> {
        if self.context.query.question != self.target_question {
            return Err(Error::validation(format!(
                "target question '{}' differs from the context query '{}'",
                self.target_question, self.context.query.question
            )));
        }
        if self.request_id.is_empty() {
            return Err(Error::validation("request_id is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelReply {
    pub raw_text: String,
    pub latency: Duration,
    pub backend_id: String,
}

/// The call contract every backend implements. `answer` is the Eq.-style
/// conditional query over an interleaved context; `complete` is a plain
/// text completion used by the question decomposer.
pub trait ModelBackend: Send + Sync {
    fn id(&self) -> &str;

    fn answer(&self, request: &ModelRequest) -> Result<ModelReply>;

    fn complete(&self, _prompt: &str, _request_id: &str) -> Result<ModelReply> {
        Err(Error::transport(
            self.id(),
            "backend does not support raw text completion",
        ))
    }
}

/// Bounds the number of concurrently outstanding model calls. Cloning
/// shares the same budget.
#[derive(Clone)]
pub struct InFlightLimiter {
    inner: Arc<(Mutex<usize>, Condvar)>,
    limit: usize,
}

impl InFlightLimiter {
    pub fn new(limit: usize) -> Self {
        InFlightLimiter {
            inner: Arc::new((Mutex::new(0), Condvar::new())),
            limit: limit.max(1),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn in_flight(&self) -> usize {
        *self.inner.0.lock().expect("limiter mutex poisoned")
    }

    /// Blocks until a slot frees up; the permit releases on drop.
    pub fn acquire(&self) -> InFlightPermit {
        let (lock, cvar) = &*self.inner;
        let mut count = lock.lock().expect("limiter mutex poisoned");
        while *count >= self.limit {
            count = cvar.wait(count).expect("limiter mutex poisoned");
        }
        *count += 1;
        InFlightPermit {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl Default for InFlightLimiter {
    fn default() -> Self {
        InFlightLimiter::new(DEFAULT_IN_FLIGHT_LIMIT)
    }
}

pub struct InFlightPermit {
    inner: Arc<(Mutex<usize>, Condvar)>,
}

impl Drop for InFlightPermit {
    fn drop(&mut self) {
        let (lock, cvar) = &*self.inner;
        let mut count = lock.lock().expect("limiter mutex poisoned");
        *count -= 1;
        cvar.notify_one();
    }
}

/// Project unconstrained model output onto the answer set: normalize and
/// return an exact vocabulary hit, otherwise the entry with the highest
/// embedding similarity (ties keep the earliest vocabulary entry). Total
/// for any input: text with nothing embeddable falls back to the first
/// entry.
pub fn align_answer(
    raw: &str,
    vocabulary: &AnswerVocabulary,
    provider: &dyn EmbeddingProvider,
) -> Result<String> {
    if vocabulary.is_empty() {
        return Err(Error::validation(
            "cannot align against an empty vocabulary",
        ));
    }
    let normalized = normalize_answer(raw);
    if vocabulary.contains(&normalized) {
        return Ok(normalized);
    }
    let basis = if normalized.is_empty() { raw } else { &normalized };
    if basis.trim().is_empty() {
        return Ok(vocabulary.entries()[0].clone());
    }
    let query = provider.embed(basis)?;
    let mut best: Option<(usize, f64)> = None;
    for (idx, embedding) in vocabulary.embeddings().iter().enumerate() {
        let sim = cosine_similarity(&query, embedding)?;
        let better = match best {
            None => true,
            Some((_, best_sim)) => sim > best_sim,
        };
        if better {
            best = Some((idx, sim));
        }
    }
    let (idx, _) = best.expect("non-empty vocabulary");
    Ok(vocabulary.entries()[idx].clone())
}
