//! Text embeddings: vector type, cosine similarity, the bundled
//! deterministic trigram provider, and an HTTP provider for external
//! embedding services.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{retry_with_backoff, Attempt};

/// A dense embedding. Stored vectors are unit-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wrap raw values, rescaling to unit L2 norm.
    pub fn unit(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("embedding must not be empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding contains non-finite values"));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(Error::validation("embedding has zero norm"));
        }
        let scaled = values.iter().map(|v| (*v as f64 / norm) as f32).collect();
        Ok(EmbeddingVector(scaled))
    }

    /// Wrap values that are already unit-normalized (within `1e-6`).
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("embedding must not be empty"));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "embedding norm {norm} is not within 1e-6 of 1"
            )));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|v| *v as f64 * *v as f64).sum::<f64>().sqrt()
}

/// Cosine similarity between two vectors of equal dimension.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum();
    let denom = a.l2_norm() * b.l2_norm();
    if denom == 0.0 {
        return Err(Error::validation("cosine similarity of zero vector"));
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

/// A source of text embeddings. Providers are interchangeable; the
/// identifier feeds cache digests so swapping providers invalidates them.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Bundled fallback provider: seeded character-trigram hashing into a
/// fixed-dimension signed bucket histogram, then L2 normalization.
/// Deterministic across platforms and runs.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder {
    seed: u64,
    dim: usize,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const DEFAULT_EMBEDDING_SEED: u64 = 17;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

impl TrigramEmbedder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        Ok(TrigramEmbedder { seed, dim })
    }
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        TrigramEmbedder {
            seed: DEFAULT_EMBEDDING_SEED,
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET ^ seed;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

impl EmbeddingProvider for TrigramEmbedder {
    fn id(&self) -> String {
        format!("trigram:d{}:s{}", self.dim, self.seed)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let cleaned = text
            .to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        if cleaned.is_empty() {
            return Err(Error::validation("cannot embed empty text"));
        }
        let padded: Vec<char> = format!("  {cleaned}  ").chars().collect();
        let mut acc = vec![0.0f64; self.dim];
        for window in padded.windows(3) {
            let gram: String = window.iter().collect();
            let h = fnv1a(self.seed, gram.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            acc[bucket] += sign;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Signed buckets can cancel exactly; fall back to counting.
            for window in padded.windows(3) {
                let gram: String = window.iter().collect();
                let h = fnv1a(self.seed, gram.as_bytes());
                acc[(h % self.dim as u64) as usize] += 1.0;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let values = acc.iter().map(|v| (*v / norm) as f32).collect();
        EmbeddingVector::from_unit(values)
    }
}

/// Provider backed by an HTTP embedding endpoint. Posts
/// `{"model": ..., "input": [text]}` and expects
/// `{"data": [{"embedding": [...]}]}`.
pub struct HttpEmbedder {
    url: String,
    model: String,
    dim: usize,
    client: reqwest::blocking::Client,
    attempts: u32,
    base_delay: Duration,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::transport("http-embed", e.to_string()))?;
        Ok(HttpEmbedder {
            url: url.into(),
            model: model.into(),
            dim,
            client,
            attempts: 3,
            base_delay: Duration::from_millis(200),
        })
    }

    #[cfg(test)]
    pub(crate) fn with_fast_retry(mut self) -> Self {
        self.base_delay = Duration::ZERO;
        self
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f32>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}@{}", self.model, self.url)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::validation("cannot embed empty text"));
        }
        let body = EmbedRequest {
            model: &self.model,
            input: vec![text],
        };
        let vector = retry_with_backoff(self.attempts, self.base_delay, |_| {
            let sent = self.client.post(&self.url).json(&body).send();
            let response = match sent {
                Ok(r) => r,
                Err(e) => return Attempt::Retry(Error::transport("http-embed", e.to_string())),
            };
            let status = response.status();
            if status.is_server_error() || status.as_u16() == 429 {
                return Attempt::Retry(Error::transport(
                    "http-embed",
                    format!("status {status}"),
                ));
            }
            if !status.is_success() {
                return Attempt::Fatal(Error::transport(
                    "http-embed",
                    format!("status {status}"),
                ));
            }
            match response.json::<EmbedResponse>() {
                Ok(parsed) => match parsed.data.into_iter().next() {
                    Some(datum) => Attempt::Done(datum.embedding),
                    None => Attempt::Fatal(Error::transport("http-embed", "empty data array")),
                },
                Err(e) => Attempt::Fatal(Error::transport("http-embed", e.to_string())),
            }
        })?;
        if vector.len() != self.dim {
            return Err(Error::transport(
                "http-embed",
                format!("expected dimension {}, got {}", self.dim, vector.len()),
            ));
        }
        EmbeddingVector::unit(vector)
    }
}
