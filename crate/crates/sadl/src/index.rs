//! In-memory embedding index and the two-stage query-specific
//! demonstration selection: shortlist by question similarity, rank the
//! shortlist by image similarity.

use serde::{Deserialize, Serialize};

use crate::dataset::DemonstrationRecord;
use crate::embed::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};

/// Shot budget for one query. `k1` generic shots come from the curated
/// pool, `k2` specific shots from the index; `k = k1 + k2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub k: usize,
    pub k1: usize,
    pub k2: usize,
    /// Stage-one shortlist size M.
    pub question_pool_size: usize,
}

pub fn default_question_pool_size(k2: usize) -> usize {
    (10 * k2).max(50)
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            k: 2,
            k1: 1,
            k2: 1,
            question_pool_size: default_question_pool_size(1),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("shot budget k must be at least 1"));
        }
        if self.k1 + self.k2 != self.k {
            return Err(Error::config(format!(
                "k1 + k2 must equal k (got {} + {} != {})",
                self.k1, self.k2, self.k
            )));
        }
        if self.question_pool_size < self.k2 {
            return Err(Error::config(format!(
                "question_pool_size {} is smaller than k2 {}",
                self.question_pool_size, self.k2
            )));
        }
        Ok(())
    }
}

struct IndexEntry {
    id: String,
    question: EmbeddingVector,
    image: EmbeddingVector,
}

/// A demonstration chosen by the two-stage selection, with both scores
/// kept for tracing and for budget-driven prompt truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedDemo {
    pub id: String,
    pub question_similarity: f64,
    pub image_similarity: f64,
}

pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
}

impl EmbeddingIndex {
    /// Build from records that already carry both embeddings. Insertion
    /// order is kept so that equal-score ties stay reproducible.
    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a DemonstrationRecord>,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        for record in records {
            let question = record.question_embedding.clone().ok_or_else(|| {
                Error::validation(format!("record '{}' has no question embedding", record.id))
            })?;
            let image = record.image_embedding.clone().ok_or_else(|| {
                Error::validation(format!("record '{}' has no image embedding", record.id))
            })?;
            entries.push(IndexEntry {
                id: record.id.clone(),
                question,
                image,
            });
        }
        Ok(EmbeddingIndex { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Two-stage selection. Stage one ranks every non-excluded entry by
    /// question cosine similarity and keeps the top `shortlist`; stage two
    /// reranks the shortlist by image cosine similarity and keeps the top
    /// `k2`. Both stages order descending by score with ascending id as
    /// the tie break, so the result is a pure function of the inputs.
    pub fn select_query_specific(
        &self,
        query_question: &EmbeddingVector,
        query_image: &EmbeddingVector,
        config: &SamplingConfig,
        exclude: &[&str],
    ) -> Result<Vec<SelectedDemo>> {
        config.validate()?;
        if config.k2 == 0 {
            return Ok(Vec::new());
        }
        let mut scored = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            if exclude.contains(&entry.id.as_str()) {
                continue;
            }
            let qs = cosine_similarity(query_question, &entry.question)?;
            scored.push((entry, qs));
        }
        if scored.len() < config.k2 {
            return Err(Error::config(format!(
                "need {} query-specific demonstrations but only {} candidates",
                config.k2,
                scored.len()
            )));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
        scored.truncate(config.question_pool_size);

        let mut reranked = Vec::with_capacity(scored.len());
        for (entry, qs) in scored {
            let is = cosine_similarity(query_image, &entry.image)?;
            reranked.push(SelectedDemo {
                id: entry.id.clone(),
                question_similarity: qs,
                image_similarity: is,
            });
        }
        reranked.sort_by(|a, b| {
            b.image_similarity
                .total_cmp(&a.image_similarity)
                .then_with(|| a.id.cmp(&b.id))
        });
        reranked.truncate(config.k2);
        Ok(reranked)
    }
}
