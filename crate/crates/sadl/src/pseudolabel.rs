//! Iterative pseudo-labeling with the adjustment mechanism.
//!
//! A demonstration's subquestion chain is answered easiest-first, each
//! step seeing the answers accumulated so far. If the final subquestion's
//! answer disagrees with the demonstration's ground-truth label, the whole
//! chain is relabeled from scratch with a "Known:" line stating the
//! ground truth, up to `r_max` restarts. When every attempt fails the
//! terminal label is forced to the ground truth so downstream prompts
//! never teach a wrong final answer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{AnswerVocabulary, DemonstrationRecord, QaPair};
use crate::decompose::SubquestionChain;
use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::gateway::{align_answer, ModelBackend, ModelRequest};
use crate::normalize::normalize_answer;
use crate::pool::GenericDemoPool;
use crate::prompt::{render_deliberate, DeliberationBlock, QueryBlock, Shot, ShotOrigin, Strategy};

pub const DEFAULT_R_MAX: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Model,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub subquestion: String,
    pub answer: String,
    pub source: LabelSource,
}

/// What happened while labeling one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentState {
    pub restarts_used: u32,
    pub ground_truth_injected: bool,
    /// True when every attempt missed the ground truth and the terminal
    /// label was overwritten with it.
    pub forced: bool,
    pub transcript: Vec<TranscriptEntry>,
    /// Transcripts of discarded attempts, oldest first.
    pub archived_attempts: Vec<Vec<TranscriptEntry>>,
    pub model_calls: u32,
}

fn pool_shots(pool: &GenericDemoPool) -> Vec<Shot> {
    pool.demos()
        .iter()
        .map(|demo| {
            let pairs: Vec<QaPair> = demo
                .chain
                .items
                .iter()
                .map(|item| QaPair {
                    question: item.subquestion.clone(),
                    answer: item.label.clone().unwrap_or_default(),
                })
                .collect();
            Shot {
                image_ref: demo.image_ref.clone(),
                question: demo.question.clone(),
                answer: demo.answer.clone(),
                deliberation: Some(DeliberationBlock::SadlLabeledChain(pairs)),
                origin: ShotOrigin::Generic,
            }
        })
        .collect()
}

/// Label every subquestion of `chain` for `demo`, restarting with the
/// ground truth injected whenever the terminal answer misses it.
///
/// Returns the fully labeled chain (terminal label always equal to the
/// normalized ground truth) together with the adjustment record. Uses at
/// most `m * (r_max + 1)` model calls for a chain of m subquestions.
pub fn pseudo_label_chain(
    demo: &DemonstrationRecord,
    chain: &SubquestionChain,
    pool: &GenericDemoPool,
    backend: &dyn ModelBackend,
    vocabulary: &AnswerVocabulary,
    provider: &dyn EmbeddingProvider,
    r_max: u32,
) -> Result<(SubquestionChain, AdjustmentState)> {
    if chain.items.is_empty() {
        return Err(Error::validation(format!(
            "demo '{}': cannot pseudo-label an empty chain",
            demo.id
        )));
    }
    if chain.items.iter().any(|item| item.label.is_some()) {
        return Err(Error::validation(format!(
            "demo '{}': chain already carries labels",
            demo.id
        )));
    }
    let ground_truth = normalize_answer(&demo.answer);
    if ground_truth.is_empty() {
        return Err(Error::validation(format!(
            "demo '{}': ground-truth answer is empty",
            demo.id
        )));
    }
    let shots = pool_shots(pool);
    let terminal_question = chain.terminal().subquestion.clone();
    let mut archived_attempts: Vec<Vec<TranscriptEntry>> = Vec::new();
    let mut model_calls = 0u32;
    for attempt in 0..=r_max {
        let known = (attempt > 0).then(|| QaPair {
            question: terminal_question.clone(),
            answer: ground_truth.clone(),
        });
        let mut answered: Vec<QaPair> = Vec::with_capacity(chain.m());
        let mut transcript: Vec<TranscriptEntry> = Vec::with_capacity(chain.m());
        for (j, item) in chain.items.iter().enumerate() {
            let query = QueryBlock {
                image_ref: demo.image_ref.clone(),
                known: known.clone(),
                answered: answered.clone(),
                question: item.subquestion.clone(),
            };
            let context = render_deliberate(&shots, &query, Strategy::Sadl)?;
            let request_id = format!("pl/{}/a{attempt}/s{}", demo.id, j + 1);
            let reply = backend.answer(&ModelRequest::new(context, request_id))?;
            model_calls += 1;
            let aligned = align_answer(&reply.raw_text, vocabulary, provider)?;
            transcript.push(TranscriptEntry {
                subquestion: item.subquestion.clone(),
                answer: aligned.clone(),
                source: LabelSource::Model,
            });
            answered.push(QaPair {
                question: item.subquestion.clone(),
                answer: aligned,
            });
        }
        let terminal_answer = &transcript.last().expect("chain is non-empty").answer;
        if normalize_answer(terminal_answer) == ground_truth {
            let labeled = apply_labels(chain, &transcript);
            return Ok((
                labeled,
                AdjustmentState {
                    restarts_used: attempt,
                    ground_truth_injected: attempt > 0,
                    forced: false,
                    transcript,
                    archived_attempts,
                    model_calls,
                },
            ));
        }
        archived_attempts.push(transcript);
    }
    // All attempts missed: keep the last attempt's intermediate answers
    // and overwrite the terminal label with the ground truth.
    let mut transcript = archived_attempts.pop().expect("at least one attempt ran");
    let terminal = transcript.last_mut().expect("chain is non-empty");
    terminal.answer = ground_truth.clone();
    terminal.source = LabelSource::GroundTruth;
    let labeled = apply_labels(chain, &transcript);
    Ok((
        labeled,
        AdjustmentState {
            restarts_used: r_max,
            ground_truth_injected: r_max > 0,
            forced: true,
            transcript,
            archived_attempts,
            model_calls,
        },
    ))
}

fn apply_labels(chain: &SubquestionChain, transcript: &[TranscriptEntry]) -> SubquestionChain {
    let mut labeled = chain.clone();
    for (item, entry) in labeled.items.iter_mut().zip(transcript) {
        item.label = Some(entry.answer.clone());
    }
    labeled
}

/// Hex digest of any serializable configuration, for cache keys.
pub fn config_digest<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)
        .map_err(|e| Error::validation(format!("cannot digest configuration: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedChain {
    pub chain: SubquestionChain,
    pub state: AdjustmentState,
}

/// Disk cache of labeled chains, keyed by demo, backend, and run
/// configuration so stale entries can never leak across settings.
pub struct LabelCache {
    dir: PathBuf,
}

impl LabelCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(Error::Io)?;
        Ok(LabelCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, demo_id: &str, backend_id: &str, digest: &str) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(demo_id.as_bytes());
        hasher.update([0]);
        hasher.update(backend_id.as_bytes());
        hasher.update([0]);
        hasher.update(digest.as_bytes());
        self.dir.join(format!("{:x}.json", hasher.finalize()))
    }

    /// A hit returns the cached chain; a corrupt entry is evicted and
    /// reported as a miss.
    pub fn get(&self, demo_id: &str, backend_id: &str, digest: &str) -> Option<CachedChain> {
        let path = self.path(demo_id, backend_id, digest);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(cached) => Some(cached),
            Err(_) => {
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    pub fn put(
        &self,
        demo_id: &str,
        backend_id: &str,
        digest: &str,
        value: &CachedChain,
    ) -> Result<()> {
        let path = self.path(demo_id, backend_id, digest);
        let bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| Error::validation(format!("cannot serialize cached chain: {e}")))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, bytes).map_err(Error::Io)?;
        fs::rename(&tmp, &path).map_err(Error::Io)?;
        Ok(())
    }
}
