//! The full answering pipeline: proximal demonstration sampling, question
//! decomposition, demonstration pseudo-labeling, prompt assembly and
//! sequential query answering, with the ablation switches used by the
//! evaluation harness.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{AnswerVocabulary, DemonstrationRecord, Library, QaPair};
use crate::decompose::{
    build_chain, build_chain_with_labels, build_decomposition_prompt, parse_decomposition,
    DecompositionExemplar, OrderingMode, SubquestionChain, DEFAULT_M_MAX,
};
use crate::embed::{cosine_similarity, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::gateway::{align_answer, ModelBackend, ModelRequest};
use crate::index::{EmbeddingIndex, SamplingConfig, SelectedDemo};
use crate::pool::{GenericDemo, GenericDemoPool};
use crate::prompt::{
    blank_chain_labels, enforce_budget, render_deliberate, render_vanilla, shuffle_chain_labels,
    DeliberationBlock, PromptContext, QueryBlock, Shot, ShotOrigin, Strategy,
};
use crate::pseudolabel::{
    config_digest, pseudo_label_chain, AdjustmentState, CachedChain, LabelCache, DEFAULT_R_MAX,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecomposerMode {
    /// Use the curated decompositions shipped with the dataset.
    Gold,
    /// Ask the backend to decompose via the worked-exemplar prompt.
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    RandomDemos,
    NoDecomposition,
    ShuffledPseudoLabels,
    UnknownPseudoLabels,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::RandomDemos,
        Ablation::NoDecomposition,
        Ablation::ShuffledPseudoLabels,
        Ablation::UnknownPseudoLabels,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::RandomDemos => "random_demos",
            Ablation::NoDecomposition => "no_decomposition",
            Ablation::ShuffledPseudoLabels => "shuffled_pseudo_labels",
            Ablation::UnknownPseudoLabels => "unknown_pseudo_labels",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sampling: SamplingConfig,
    pub ordering: OrderingMode,
    pub m_max: usize,
    pub r_max: u32,
    pub max_prompt_chars: Option<usize>,
    pub decomposer: DecomposerMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sampling: SamplingConfig::default(),
            ordering: OrderingMode::Increasing,
            m_max: DEFAULT_M_MAX,
            r_max: DEFAULT_R_MAX,
            max_prompt_chars: None,
            decomposer: DecomposerMode::Gold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryStep {
    pub subquestion: String,
    pub request_id: String,
    pub prompt: String,
    pub raw_reply: String,
    pub aligned: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryTrace {
    pub query_id: String,
    pub strategy: Strategy,
    pub ablation: Ablation,
    pub selected: Vec<SelectedDemo>,
    pub chain: Option<SubquestionChain>,
    pub steps: Vec<QueryStep>,
    pub predicted: String,
    pub model_calls: u32,
}

#[derive(Debug, Clone)]
pub struct QueryResult {
    pub predicted: String,
    pub trace: QueryTrace,
}

/// Pseudo-labeling effort accumulated by this pipeline instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjustmentSummary {
    pub chains: usize,
    pub restarts_total: u32,
    pub forced_chains: u32,
    pub model_calls: u32,
}

pub struct Pipeline<'a> {
    library: &'a Library,
    pool: &'a GenericDemoPool,
    gold: &'a BTreeMap<String, Vec<QaPair>>,
    backend: &'a dyn ModelBackend,
    vocabulary: &'a AnswerVocabulary,
    provider: &'a dyn EmbeddingProvider,
    index: EmbeddingIndex,
    config: PipelineConfig,
    seed: u64,
    digest: String,
    labeled: BTreeMap<String, (SubquestionChain, AdjustmentState)>,
    cache: Option<LabelCache>,
}

fn derive_u64(seed: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[0..8].try_into().expect("8 bytes"))
}

impl<'a> Pipeline<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        library: &'a Library,
        pool: &'a GenericDemoPool,
        gold: &'a BTreeMap<String, Vec<QaPair>>,
        backend: &'a dyn ModelBackend,
        vocabulary: &'a AnswerVocabulary,
        provider: &'a dyn EmbeddingProvider,
        config: PipelineConfig,
        seed: u64,
    ) -> Result<Self> {
        config.sampling.validate()?;
        if config.m_max == 0 {
            return Err(Error::config("m_max must be at least 1"));
        }
        let index = EmbeddingIndex::build(library.train_records())?;
        let digest = config_digest(&(&config, seed))?;
        Ok(Pipeline {
            library,
            pool,
            gold,
            backend,
            vocabulary,
            provider,
            index,
            config,
            seed,
            digest,
            labeled: BTreeMap::new(),
            cache: None,
        })
    }

    pub fn with_label_cache(mut self, cache: LabelCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn ensure_embedding(
        &self,
        stored: &Option<EmbeddingVector>,
        text: &str,
    ) -> Result<EmbeddingVector> {
        match stored {
            Some(v) => Ok(v.clone()),
            None => self.provider.embed(text),
        }
    }

    /// Two-stage proximal selection for one query, excluding the query
    /// record itself.
    pub fn select_demos(&self, record: &DemonstrationRecord) -> Result<Vec<SelectedDemo>> {
        let question = self.ensure_embedding(&record.question_embedding, &record.question)?;
        let image = self.ensure_embedding(&record.image_embedding, &record.caption)?;
        self.index
            .select_query_specific(&question, &image, &self.config.sampling, &[&record.id])
    }

    /// Uniform random selection, for the random-demonstration ablation.
    /// Seeded per query so runs replay exactly.
    fn random_demos(&self, record: &DemonstrationRecord) -> Result<Vec<SelectedDemo>> {
        let k2 = self.config.sampling.k2;
        let candidates: Vec<&DemonstrationRecord> = self
            .library
            .train_records()
            .filter(|r| r.id != record.id)
            .collect();
        if candidates.len() < k2 {
            return Err(Error::config(format!(
                "library holds {} candidate demonstrations, need k2 = {k2}",
                candidates.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_u64(
            self.seed,
            &["random-demos", &record.id],
        ));
        let question = self.ensure_embedding(&record.question_embedding, &record.question)?;
        let image = self.ensure_embedding(&record.image_embedding, &record.caption)?;
        let mut picked: Vec<SelectedDemo> = rand::seq::index::sample(&mut rng, candidates.len(), k2)
            .into_iter()
            .map(|idx| {
                let demo = candidates[idx];
                let question_similarity = demo
                    .question_embedding
                    .as_ref()
                    .map(|v| cosine_similarity(v, &question))
                    .transpose()?
                    .unwrap_or(0.0);
                let image_similarity = demo
                    .image_embedding
                    .as_ref()
                    .map(|v| cosine_similarity(v, &image))
                    .transpose()?
                    .unwrap_or(0.0);
                Ok(SelectedDemo {
                    id: demo.id.clone(),
                    question_similarity,
                    image_similarity,
                })
            })
            .collect::<Result<_>>()?;
        picked.sort_by(|a, b| {
            b.image_similarity
                .total_cmp(&a.image_similarity)
                .then_with(|| a.id.cmp(&b.id))
        });
        Ok(picked)
    }

    /// Decompose one question into an ordered, unlabeled chain.
    pub fn decompose(&self, record: &DemonstrationRecord) -> Result<SubquestionChain> {
        match self.config.decomposer {
            DecomposerMode::Gold => {
                let pairs = self.gold.get(&record.id).ok_or_else(|| {
                    Error::validation(format!(
                        "no gold decomposition for record '{}'",
                        record.id
                    ))
                })?;
                let subquestions = pairs.iter().map(|p| p.question.clone()).collect();
                build_chain(&record.question, subquestions, self.config.ordering)
            }
            DecomposerMode::Llm => {
                let exemplars: Vec<DecompositionExemplar> = self
                    .pool
                    .demos()
                    .iter()
                    .map(|demo| DecompositionExemplar {
                        question: demo.question.clone(),
                        subquestions: demo.chain.subquestions().map(str::to_string).collect(),
                    })
                    .collect();
                let prompt = build_decomposition_prompt(&record.question, &exemplars)?;
                let reply = self
                    .backend
                    .complete(&prompt, &format!("dc/{}", record.id))?;
                match parse_decomposition(&reply.raw_text, self.config.m_max) {
                    Ok(subquestions) => {
                        build_chain(&record.question, subquestions, self.config.ordering)
                    }
                    // An unusable decomposition degrades to the question
                    // answered in one step, never to a failed query.
                    Err(Error::EmptyDecomposition) => build_chain(
                        &record.question,
                        vec![record.question.clone()],
                        self.config.ordering,
                    ),
                    Err(e) => Err(e),
                }
            }
        }
    }

    /// The gold chain of a library record, labels included.
    fn gold_chain(&self, record: &DemonstrationRecord) -> Result<SubquestionChain> {
        let pairs = self.gold.get(&record.id).ok_or_else(|| {
            Error::validation(format!("no gold decomposition for record '{}'", record.id))
        })?;
        build_chain_with_labels(&record.question, pairs, self.config.ordering)
    }

    /// Pseudo-label one demonstration's chain, memoized in memory and in
    /// the optional disk cache.
    pub fn labeled_chain(&mut self, demo_id: &str) -> Result<(SubquestionChain, AdjustmentState)> {
        if let Some(hit) = self.labeled.get(demo_id) {
            return Ok(hit.clone());
        }
        if let Some(cache) = &self.cache {
            if let Some(cached) = cache.get(demo_id, self.backend.id(), &self.digest) {
                self.labeled
                    .insert(demo_id.to_string(), (cached.chain.clone(), cached.state.clone()));
                return Ok((cached.chain, cached.state));
            }
        }
        let record = self
            .library
            .get(demo_id)
            .ok_or_else(|| Error::validation(format!("unknown demonstration '{demo_id}'")))?;
        let chain = self.decompose(record)?;
        let (labeled, state) = pseudo_label_chain(
            record,
            &chain,
            self.pool,
            self.backend,
            self.vocabulary,
            self.provider,
            self.config.r_max,
        )?;
        if let Some(cache) = &self.cache {
            cache.put(
                demo_id,
                self.backend.id(),
                &self.digest,
                &CachedChain {
                    chain: labeled.clone(),
                    state: state.clone(),
                },
            )?;
        }
        self.labeled
            .insert(demo_id.to_string(), (labeled.clone(), state.clone()));
        Ok((labeled, state))
    }

    pub fn adjustment_summary(&self) -> AdjustmentSummary {
        let mut summary = AdjustmentSummary::default();
        for (_, state) in self.labeled.values() {
            summary.chains += 1;
            summary.restarts_total += state.restarts_used;
            summary.forced_chains += u32::from(state.forced);
            summary.model_calls += state.model_calls;
        }
        summary
    }

    fn chain_pairs(chain: &SubquestionChain) -> Vec<QaPair> {
        chain
            .items
            .iter()
            .map(|item| QaPair {
                question: item.subquestion.clone(),
                answer: item.label.clone().unwrap_or_default(),
            })
            .collect()
    }

    fn deliberation_for(strategy: Strategy, chain: &SubquestionChain) -> Option<DeliberationBlock> {
        match strategy {
            Strategy::Vanilla => None,
            Strategy::Cot => Some(DeliberationBlock::CotRationale(
                chain
                    .items
                    .iter()
                    .enumerate()
                    .map(|(j, item)| {
                        format!(
                            "Step {}: {} {}.",
                            j + 1,
                            item.subquestion,
                            item.label.clone().unwrap_or_default()
                        )
                    })
                    .collect(),
            )),
            Strategy::L2m => Some(DeliberationBlock::L2mSubproblems(
                chain.subquestions().map(str::to_string).collect(),
            )),
            Strategy::Sadl => Some(DeliberationBlock::SadlLabeledChain(Self::chain_pairs(chain))),
        }
    }

    fn build_shots(
        &mut self,
        generic: &[GenericDemo],
        specific: &[SelectedDemo],
        strategy: Strategy,
    ) -> Result<Vec<Shot>> {
        let library = self.library;
        let mut shots = Vec::with_capacity(generic.len() + specific.len());
        for demo in generic {
            shots.push(Shot {
                image_ref: demo.image_ref.clone(),
                question: demo.question.clone(),
                answer: demo.answer.clone(),
                deliberation: Self::deliberation_for(strategy, &demo.chain),
                origin: ShotOrigin::Generic,
            });
        }
        for selected in specific {
            let record = library.get(&selected.id).ok_or_else(|| {
                Error::validation(format!("selected unknown demonstration '{}'", selected.id))
            })?;
            let deliberation = match strategy {
                Strategy::Vanilla => None,
                Strategy::Cot | Strategy::L2m => {
                    Some(Self::deliberation_for(strategy, &self.gold_chain(record)?)
                        .expect("non-vanilla strategies carry deliberation"))
                }
                Strategy::Sadl => {
                    let (chain, _) = self.labeled_chain(&selected.id)?;
                    Some(Self::deliberation_for(strategy, &chain)
                        .expect("non-vanilla strategies carry deliberation"))
                }
            };
            shots.push(Shot {
                image_ref: record.image_ref.clone(),
                question: record.question.clone(),
                answer: record.answer.clone(),
                deliberation,
                origin: ShotOrigin::Specific {
                    image_similarity: selected.image_similarity,
                },
            });
        }
        Ok(shots)
    }

    fn apply_label_ablation(&self, record_id: &str, ablation: Ablation, shots: &mut [Shot]) {
        for (idx, shot) in shots.iter_mut().enumerate() {
            let Some(DeliberationBlock::SadlLabeledChain(pairs)) = &mut shot.deliberation else {
                continue;
            };
            match ablation {
                Ablation::ShuffledPseudoLabels => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_u64(
                        self.seed,
                        &["shuffle", record_id, &idx.to_string()],
                    ));
                    shuffle_chain_labels(pairs, &mut rng);
                }
                Ablation::UnknownPseudoLabels => blank_chain_labels(pairs, "unknown"),
                _ => {}
            }
        }
    }

    fn render(
        &self,
        strategy: Strategy,
        shots: &[Shot],
        query: &QueryBlock,
    ) -> Result<PromptContext> {
        let context = match strategy {
            Strategy::Vanilla => render_vanilla(shots, query)?,
            _ => render_deliberate(shots, query, strategy)?,
        };
        match self.config.max_prompt_chars {
            Some(max) => enforce_budget(context, max),
            None => Ok(context),
        }
    }

    fn call(&self, context: PromptContext, request_id: String) -> Result<QueryStep> {
        let subquestion = context.query.question.clone();
        let prompt = context.rendered_text();
        let reply = self
            .backend
            .answer(&ModelRequest::new(context, request_id.clone()))?;
        let aligned = align_answer(&reply.raw_text, self.vocabulary, self.provider)?;
        Ok(QueryStep {
            subquestion,
            request_id,
            prompt,
            raw_reply: reply.raw_text,
            aligned,
        })
    }

    /// Answer one query record with the given strategy. Vanilla and CoT
    /// use a single model call; L2M and SADL answer the decomposition
    /// sequentially, feeding each answer into the next step's prompt.
    pub fn answer_query(
        &mut self,
        record: &DemonstrationRecord,
        strategy: Strategy,
        ablation: Ablation,
    ) -> Result<QueryResult> {
        if ablation != Ablation::None && strategy != Strategy::Sadl {
            return Err(Error::config(format!(
                "ablation '{ablation}' applies to the sadl strategy only"
            )));
        }
        let specific = match ablation {
            Ablation::RandomDemos => self.random_demos(record)?,
            _ => self.select_demos(record)?,
        };
        let generic: Vec<GenericDemo> = self.pool.take(self.config.sampling.k1)?.to_vec();
        let mut shots = self.build_shots(&generic, &specific, strategy)?;
        self.apply_label_ablation(&record.id, ablation, &mut shots);

        let single_call = matches!(strategy, Strategy::Vanilla | Strategy::Cot)
            || ablation == Ablation::NoDecomposition;
        let mut steps: Vec<QueryStep> = Vec::new();
        let mut chain = None;
        if single_call {
            let query = QueryBlock::new(&record.image_ref, &record.question);
            let context = self.render(strategy, &shots, &query)?;
            steps.push(self.call(context, format!("q/{}/s1", record.id))?);
        } else {
            let ordered = self.decompose(record)?;
            let mut answered: Vec<QaPair> = Vec::with_capacity(ordered.m());
            for (j, item) in ordered.items.iter().enumerate() {
                let query = QueryBlock {
                    image_ref: record.image_ref.clone(),
                    known: None,
                    answered: answered.clone(),
                    question: item.subquestion.clone(),
                };
                let context = self.render(strategy, &shots, &query)?;
                let step = self.call(context, format!("q/{}/s{}", record.id, j + 1))?;
                answered.push(QaPair {
                    question: item.subquestion.clone(),
                    answer: step.aligned.clone(),
                });
                steps.push(step);
            }
            chain = Some(ordered);
        }
        let predicted = steps.last().expect("at least one step ran").aligned.clone();
        let model_calls = steps.len() as u32;
        Ok(QueryResult {
            predicted: predicted.clone(),
            trace: QueryTrace {
                query_id: record.id.clone(),
                strategy,
                ablation,
                selected: specific,
                chain,
                steps,
                predicted,
                model_calls,
            },
        })
    }
}
