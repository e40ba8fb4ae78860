//! Deterministic scene-graph oracle: a desk-scale stand-in for an LVLM.
//!
//! With `atomic_error_rate` 0 the oracle is a sound and complete evaluator
//! over the synthetic question grammar. With a positive rate it corrupts
//! answers pseudo-randomly, and the corruption probability reacts to the
//! context the way a real model's accuracy does: questions whose
//! prerequisite facts are already established in the query block are
//! safer, demonstrations of the same question family help, deliberation
//! sections help, and correct demonstration labels help while misleading
//! ones hurt. Every draw is a pure function of (seed, request_id), so runs
//! replay bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::dataset::SceneGraph;
use crate::error::{Error, Result};
use crate::gateway::{ModelBackend, ModelReply, ModelRequest};
use crate::normalize::normalize_answer;
use crate::prompt::{DeliberationBlock, PromptContext, QueryBlock};
use crate::scene::{
    asserted_facts, evaluate, parse_question, support_facts, ParsedQuestion, UNRESOLVED,
};

/// Weight of the same-family demonstration fraction in the error modifier.
pub const FAMILY_WEIGHT: f64 = 0.9;
/// Weight of the deliberation-presence fraction.
pub const DELIBERATION_WEIGHT: f64 = 0.5;
/// Weight of the demonstration label-correctness score.
pub const LABEL_WEIGHT: f64 = 1.1;
/// The modifier never turns errors off entirely nor amplifies without bound.
pub const MODIFIER_FLOOR: f64 = 0.05;
pub const MODIFIER_CEILING: f64 = 2.5;
const MAX_EFFECTIVE_RATE: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct OracleBackendConfig {
    pub scene_graphs: BTreeMap<String, SceneGraph>,
    pub atomic_error_rate: f64,
    /// Wrong answers are suppressed when the exact (question, correct
    /// answer) pair already occurs in the context.
    pub context_repair: bool,
    pub seed: u64,
}

pub struct OracleBackend {
    id: String,
    config: OracleBackendConfig,
    vocabulary: Vec<String>,
    decompositions: BTreeMap<String, Vec<String>>,
}

/// All answers the scene set can produce: yes/no/unknown plus every
/// attribute and category. Used as the corruption candidate pool.
pub fn derived_vocabulary(scenes: &BTreeMap<String, SceneGraph>) -> Vec<String> {
    let mut entries: BTreeSet<String> = ["yes", "no", UNRESOLVED]
        .into_iter()
        .map(str::to_string)
        .collect();
    for scene in scenes.values() {
        for object in &scene.objects {
            entries.insert(object.category.clone());
            entries.extend(object.attributes.iter().cloned());
        }
    }
    entries.into_iter().collect()
}

impl OracleBackend {
    pub fn new(config: OracleBackendConfig) -> Result<Self> {
        if !config.atomic_error_rate.is_finite()
            || !(0.0..1.0).contains(&config.atomic_error_rate)
        {
            return Err(Error::config(format!(
                "atomic_error_rate must lie in [0, 1), got {}",
                config.atomic_error_rate
            )));
        }
        let vocabulary = derived_vocabulary(&config.scene_graphs);
        Ok(OracleBackend {
            id: "oracle".to_string(),
            config,
            vocabulary,
            decompositions: BTreeMap::new(),
        })
    }

    /// Override the corruption candidate pool.
    pub fn with_vocabulary<S: Into<String>>(
        mut self,
        entries: impl IntoIterator<Item = S>,
    ) -> Self {
        let mut seen = BTreeSet::new();
        self.vocabulary = entries
            .into_iter()
            .map(|e| normalize_answer(&e.into()))
            .filter(|e| !e.is_empty() && seen.insert(e.clone()))
            .collect();
        self
    }

    /// Scripted replies for `complete`: question text -> subquestions.
    pub fn with_decompositions(mut self, map: BTreeMap<String, Vec<String>>) -> Self {
        self.decompositions = map;
        self
    }

    pub fn scene_graphs(&self) -> &BTreeMap<String, SceneGraph> {
        &self.config.scene_graphs
    }

    fn reply(&self, raw_text: String) -> ModelReply {
        ModelReply {
            raw_text,
            latency: Duration::ZERO,
            backend_id: self.id.clone(),
        }
    }

    /// Two independent uniform draws from (seed, request_id).
    fn draw(&self, request_id: &str) -> (f64, u64) {
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(request_id.as_bytes());
        let digest = hasher.finalize();
        let u = u64::from_le_bytes(digest[0..8].try_into().expect("8 bytes"));
        let pick = u64::from_le_bytes(digest[8..16].try_into().expect("8 bytes"));
        (u as f64 / (u64::MAX as f64 + 1.0), pick)
    }

    fn corrupt(&self, correct: &str, pick: u64) -> String {
        let candidates: Vec<&String> = self
            .vocabulary
            .iter()
            .filter(|v| v.as_str() != correct)
            .collect();
        if candidates.is_empty() {
            return correct.to_string();
        }
        candidates[(pick % candidates.len() as u64) as usize].clone()
    }

    /// (question, answer) pairs asserted by the query block itself.
    fn prelude_pairs(query: &QueryBlock) -> Vec<(&str, &str)> {
        let mut pairs = Vec::with_capacity(query.answered.len() + 1);
        if let Some(known) = &query.known {
            pairs.push((known.question.as_str(), known.answer.as_str()));
        }
        for pair in &query.answered {
            pairs.push((pair.question.as_str(), pair.answer.as_str()));
        }
        pairs
    }

    fn context_repairs(&self, context: &PromptContext, question: &str, correct: &str) -> bool {
        let matches = |q: &str, a: &str| q == question && normalize_answer(a) == correct;
        for (q, a) in Self::prelude_pairs(&context.query) {
            if matches(q, a) {
                return true;
            }
        }
        for block in &context.blocks {
            if matches(&block.question, &block.answer) {
                return true;
            }
            if let Some(DeliberationBlock::SadlLabeledChain(pairs)) = &block.deliberation {
                if pairs.iter().any(|p| matches(&p.question, &p.answer)) {
                    return true;
                }
            }
        }
        false
    }

    /// 1 + the number of the target's support facts not yet established by
    /// a correctly answered pair in the query block.
    fn effective_depth(
        &self,
        scene: &SceneGraph,
        target: Option<&ParsedQuestion>,
        query: &QueryBlock,
    ) -> usize {
        let Some(target) = target else { return 1 };
        let support = support_facts(target);
        if support.is_empty() {
            return 1;
        }
        let mut grounded: BTreeSet<String> = BTreeSet::new();
        for (q_text, a_text) in Self::prelude_pairs(query) {
            if let Some(parsed) = parse_question(q_text) {
                if normalize_answer(a_text) == evaluate(scene, &parsed) {
                    grounded.extend(asserted_facts(&parsed, a_text));
                }
            }
        }
        1 + support.difference(&grounded).count()
    }

    /// (f1, f2, s3): same-family fraction, deliberation fraction, and mean
    /// demonstration label score. Each defaults to the neutral 0.5 when
    /// its evidence is absent, so an empty context leaves the error rate
    /// at exactly `atomic_error_rate`.
    fn context_features(&self, context: &PromptContext) -> (f64, f64, f64) {
        if context.blocks.is_empty() {
            return (0.5, 0.5, 0.5);
        }
        let target_family = parse_question(&context.query.question).map(|q| q.family());
        let total = context.blocks.len() as f64;
        let mut family_matches = 0usize;
        let mut deliberate = 0usize;
        let mut pair_scores: Vec<f64> = Vec::new();
        for block in &context.blocks {
            if let (Some(tf), Some(parsed)) = (target_family, parse_question(&block.question)) {
                if parsed.family() == tf {
                    family_matches += 1;
                }
            }
            if block.deliberation.is_some() {
                deliberate += 1;
            }
            if let Some(DeliberationBlock::SadlLabeledChain(pairs)) = &block.deliberation {
                let Some(scene) = self.config.scene_graphs.get(&block.image_ref) else {
                    continue;
                };
                for pair in pairs {
                    let score = match parse_question(&pair.question) {
                        None => 0.5,
                        Some(parsed) => {
                            let truth = evaluate(scene, &parsed);
                            let label = normalize_answer(&pair.answer);
                            if label == truth {
                                1.0
                            } else if label == UNRESOLVED {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    pair_scores.push(score);
                }
            }
        }
        let f1 = match target_family {
            Some(_) => family_matches as f64 / total,
            None => 0.5,
        };
        let f2 = deliberate as f64 / total;
        let s3 = if pair_scores.is_empty() {
            0.5
        } else {
            pair_scores.iter().sum::<f64>() / pair_scores.len() as f64
        };
        (f1, f2, s3)
    }

    /// The corruption probability for one request, exposed for tests.
    pub fn corruption_probability(&self, request: &ModelRequest) -> Result<f64> {
        let scene = self
            .config
            .scene_graphs
            .get(&request.context.query.image_ref)
            .ok_or_else(|| Error::UnknownImage(request.context.query.image_ref.clone()))?;
        let parsed = parse_question(&request.target_question);
        let depth = self.effective_depth(scene, parsed.as_ref(), &request.context.query);
        let (f1, f2, s3) = self.context_features(&request.context);
        let modifier = (1.0
            - FAMILY_WEIGHT * (f1 - 0.5)
            - DELIBERATION_WEIGHT * (f2 - 0.5)
            - LABEL_WEIGHT * (s3 - 0.5))
            .clamp(MODIFIER_FLOOR, MODIFIER_CEILING);
        let p_eff = (self.config.atomic_error_rate * modifier).min(MAX_EFFECTIVE_RATE);
        if depth == 1 {
            return Ok(p_eff);
        }
        Ok(1.0 - (1.0 - p_eff).powi(depth as i32))
    }
}

impl ModelBackend for OracleBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn answer(&self, request: &ModelRequest) -> Result<ModelReply> {
        request.validate()?;
        let scene = self
            .config
            .scene_graphs
            .get(&request.context.query.image_ref)
            .ok_or_else(|| Error::UnknownImage(request.context.query.image_ref.clone()))?;
        let correct = match parse_question(&request.target_question) {
            Some(parsed) => evaluate(scene, &parsed),
            None => UNRESOLVED.to_string(),
        };
        if self.config.atomic_error_rate == 0.0 {
            return Ok(self.reply(correct));
        }
        if self.config.context_repair
            && self.context_repairs(&request.context, &request.target_question, &correct)
        {
            return Ok(self.reply(correct));
        }
        let p_corrupt = self.corruption_probability(request)?;
        let (u, pick) = self.draw(&request.request_id);
        if u < p_corrupt {
            return Ok(self.reply(self.corrupt(&correct, pick)));
        }
        Ok(self.reply(correct))
    }

    /// Serve a scripted decomposition for the question named on the
    /// prompt's final exemplar line.
    fn complete(&self, prompt: &str, _request_id: &str) -> Result<ModelReply> {
        let marker_prefix = "To answer the question: ";
        let marker_suffix = ", we need to know:";
        let question = prompt
            .lines()
            .last()
            .and_then(|line| line.strip_prefix(marker_prefix))
            .and_then(|rest| rest.strip_suffix(marker_suffix))
            .ok_or_else(|| {
                Error::transport(&self.id, "completion prompt has no decomposition marker")
            })?;
        match self.decompositions.get(question) {
            Some(subs) => Ok(self.reply(subs.join("; "))),
            None => Err(Error::transport(
                &self.id,
                format!("no decomposition scripted for '{question}'"),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::QaPair;
    use crate::pool::{bundled_scenes, POOL_SCENE_A};
    use crate::prompt::{render_deliberate, render_vanilla, Shot, ShotOrigin, Strategy};

    fn oracle(p: f64, seed: u64, repair: bool) -> OracleBackend {
        OracleBackend::new(OracleBackendConfig {
            scene_graphs: bundled_scenes(),
            atomic_error_rate: p,
            context_repair: repair,
            seed,
        })
        .unwrap()
    }

    fn bare_request(question: &str, request_id: &str) -> ModelRequest {
        let query = QueryBlock::new(POOL_SCENE_A, question);
        ModelRequest::new(render_vanilla(&[], &query).unwrap(), request_id)
    }

    fn qa(q: &str, a: &str) -> QaPair {
        QaPair {
            question: q.to_string(),
            answer: a.to_string(),
        }
    }

    #[test]
    fn noiseless_oracle_evaluates_the_scene() {
        let backend = oracle(0.0, 1, true);
        let cases = [
            ("Is there a red cube to the left of the blue sphere?", "yes"),
            ("Is there a red cube to the right of the blue sphere?", "no"),
            ("What color is the cylinder to the right of the blue sphere?", "green"),
            ("Is the blue sphere behind the red cube?", "yes"),
            ("Is it raining?", UNRESOLVED),
        ];
        for (question, expected) in cases {
            let reply = backend.answer(&bare_request(question, "t")).unwrap();
            assert_eq!(reply.raw_text, expected, "question: {question}");
        }
    }

    #[test]
    fn unknown_image_is_a_typed_error() {
        let backend = oracle(0.0, 1, true);
        let query = QueryBlock::new("img/missing.png", "Is it raining?");
        let request = ModelRequest::new(render_vanilla(&[], &query).unwrap(), "t");
        assert!(matches!(
            backend.answer(&request),
            Err(Error::UnknownImage(r)) if r == "img/missing.png"
        ));
    }

    #[test]
    fn invalid_error_rate_is_rejected() {
        for p in [1.0, 1.5, -0.1, f64::NAN] {
            let result = OracleBackend::new(OracleBackendConfig {
                scene_graphs: bundled_scenes(),
                atomic_error_rate: p,
                context_repair: false,
                seed: 0,
            });
            assert!(result.is_err(), "rate {p} must be rejected");
        }
    }

    #[test]
    fn replies_are_deterministic_per_seed_and_request_id() {
        let backend = oracle(0.5, 123, false);
        let a = backend
            .answer(&bare_request("Is there a red cube in the image?", "same-id"))
            .unwrap();
        let b = backend
            .answer(&bare_request("Is there a red cube in the image?", "same-id"))
            .unwrap();
        assert_eq!(a.raw_text, b.raw_text);
        let again = oracle(0.5, 123, false);
        let c = again
            .answer(&bare_request("Is there a red cube in the image?", "same-id"))
            .unwrap();
        assert_eq!(a.raw_text, c.raw_text);
    }

    #[test]
    fn neutral_corruption_count_is_binomial_at_p() {
        // 1000 atomic questions, p=0.15, seed=7: expectation 150, plus or
        // minus three sigma is about 34.
        let backend = oracle(0.15, 7, false);
        let mut corrupted = 0;
        for i in 0..1000 {
            let request = bare_request("Is there a red cube in the image?", &format!("bin/{i}"));
            assert_eq!(backend.corruption_probability(&request).unwrap(), 0.15);
            let reply = backend.answer(&request).unwrap();
            if reply.raw_text != "yes" {
                corrupted += 1;
            }
        }
        assert!(
            (115..=185).contains(&corrupted),
            "corrupted {corrupted} of 1000"
        );
    }

    #[test]
    fn zero_rate_never_corrupts() {
        let backend = oracle(0.0, 7, false);
        for i in 0..200 {
            let reply = backend
                .answer(&bare_request(
                    "Is there a red cube in the image?",
                    &format!("z/{i}"),
                ))
                .unwrap();
            assert_eq!(reply.raw_text, "yes");
        }
    }

    #[test]
    fn corrupted_answers_are_other_vocabulary_entries() {
        let backend = oracle(0.9, 3, false);
        let vocab = derived_vocabulary(&bundled_scenes());
        let mut saw_corruption = false;
        for i in 0..60 {
            let reply = backend
                .answer(&bare_request(
                    "Is there a red cube in the image?",
                    &format!("c/{i}"),
                ))
                .unwrap();
            if reply.raw_text != "yes" {
                saw_corruption = true;
                assert!(vocab.contains(&reply.raw_text), "got {}", reply.raw_text);
            }
        }
        assert!(saw_corruption, "p=0.9 must corrupt at least once in 60");
    }

    #[test]
    fn context_repair_suppresses_corruption() {
        let question = "Is there a red cube in the image?";
        let mut query = QueryBlock::new(POOL_SCENE_A, question);
        query.known = Some(qa(question, "yes"));
        let repaired = oracle(0.9, 3, true);
        for i in 0..60 {
            let request = ModelRequest::new(
                render_vanilla(&[], &query).unwrap(),
                format!("r/{i}"),
            );
            assert_eq!(repaired.answer(&request).unwrap().raw_text, "yes");
        }
        // Repair only fires on the exact pair: a wrong known answer does
        // not suppress corruption.
        let mut wrong = QueryBlock::new(POOL_SCENE_A, question);
        wrong.known = Some(qa(question, "no"));
        let mut corrupted = 0;
        for i in 0..60 {
            let request =
                ModelRequest::new(render_vanilla(&[], &wrong).unwrap(), format!("r/{i}"));
            if repaired.answer(&request).unwrap().raw_text != "yes" {
                corrupted += 1;
            }
        }
        assert!(corrupted > 0);
    }

    fn count_corruptions(backend: &OracleBackend, request: impl Fn(usize) -> ModelRequest, n: usize) -> usize {
        let mut corrupted = 0;
        for i in 0..n {
            let request = request(i);
            let scene = &backend.scene_graphs()[&request.context.query.image_ref];
            let truth = crate::scene::answer_question(scene, &request.target_question);
            if backend.answer(&request).unwrap().raw_text != truth {
                corrupted += 1;
            }
        }
        corrupted
    }

    #[test]
    fn grounded_support_facts_lower_the_corruption_probability() {
        let backend = oracle(0.15, 11, false);
        let question = "Is there a red cube to the left of the blue sphere?";
        let cold = |i: usize| bare_request(question, &format!("g/{i}"));
        let grounded = |i: usize| {
            let mut query = QueryBlock::new(POOL_SCENE_A, question);
            query.answered = vec![
                qa("Is there a red cube in the image?", "yes"),
                qa("Is there a blue sphere in the image?", "yes"),
            ];
            ModelRequest::new(render_vanilla(&[], &query).unwrap(), format!("g/{i}"))
        };
        // Wrong prelude answers must not ground anything.
        let misgrounded = |i: usize| {
            let mut query = QueryBlock::new(POOL_SCENE_A, question);
            query.answered = vec![
                qa("Is there a red cube in the image?", "no"),
                qa("Is there a blue sphere in the image?", "no"),
            ];
            ModelRequest::new(render_vanilla(&[], &query).unwrap(), format!("g/{i}"))
        };
        let deep = 1.0 - 0.85f64.powi(3);
        assert!((backend.corruption_probability(&cold(0)).unwrap() - deep).abs() < 1e-12);
        assert_eq!(backend.corruption_probability(&grounded(0)).unwrap(), 0.15);
        assert!(
            (backend.corruption_probability(&misgrounded(0)).unwrap() - deep).abs() < 1e-12
        );
        let n = 500;
        let cold_count = count_corruptions(&backend, cold, n);
        let grounded_count = count_corruptions(&backend, grounded, n);
        let misgrounded_count = count_corruptions(&backend, misgrounded, n);
        assert!(
            grounded_count < cold_count,
            "grounded {grounded_count} vs cold {cold_count}"
        );
        assert_eq!(misgrounded_count, cold_count);
    }

    fn labeled_shot(labels: [&str; 3]) -> Shot {
        Shot {
            image_ref: POOL_SCENE_A.to_string(),
            question: "Is there a green cylinder behind the blue sphere?".to_string(),
            answer: "no".to_string(),
            deliberation: Some(DeliberationBlock::SadlLabeledChain(vec![
                qa("Is there a green cylinder in the image?", labels[0]),
                qa("Is there a blue sphere in the image?", labels[1]),
                qa("Is there a green cylinder behind the blue sphere?", labels[2]),
            ])),
            origin: ShotOrigin::Specific {
                image_similarity: 0.9,
            },
        }
    }

    #[test]
    fn label_quality_moves_the_error_rate_in_both_directions() {
        let backend = oracle(0.15, 19, false);
        let target = "Is there a red cube in the image?";
        let with_labels = |labels: [&str; 3], i: usize| {
            let query = QueryBlock::new(POOL_SCENE_A, target);
            let context =
                render_deliberate(&[labeled_shot(labels)], &query, Strategy::Sadl).unwrap();
            ModelRequest::new(context, format!("l/{i}"))
        };
        // Correct labels: yes, yes, no (the cylinder is in front, not
        // behind). Same family as the target, deliberation present.
        let good = |i: usize| with_labels(["yes", "yes", "no"], i);
        let wrong = |i: usize| with_labels(["no", "no", "yes"], i);
        let toxic = |i: usize| with_labels(["unknown", "unknown", "unknown"], i);
        let neutral = |i: usize| bare_request(target, &format!("l/{i}"));
        let p_good = backend.corruption_probability(&good(0)).unwrap();
        let p_wrong = backend.corruption_probability(&wrong(0)).unwrap();
        let p_toxic = backend.corruption_probability(&toxic(0)).unwrap();
        let p_neutral = backend.corruption_probability(&neutral(0)).unwrap();
        assert!(p_good < p_neutral, "good {p_good} vs neutral {p_neutral}");
        assert!(p_wrong > p_good);
        assert!(p_toxic > p_wrong, "toxic {p_toxic} vs wrong {p_wrong}");
        let n = 500;
        let good_count = count_corruptions(&backend, good, n);
        let toxic_count = count_corruptions(&backend, toxic, n);
        let neutral_count = count_corruptions(&backend, neutral, n);
        assert!(good_count < neutral_count);
        assert!(toxic_count > neutral_count);
    }

    #[test]
    fn same_family_demonstrations_lower_the_rate() {
        let backend = oracle(0.15, 23, false);
        let target = "Is there a red cube in the image?";
        let shot = |question: &str, answer: &str| Shot {
            image_ref: POOL_SCENE_A.to_string(),
            question: question.to_string(),
            answer: answer.to_string(),
            deliberation: None,
            origin: ShotOrigin::Generic,
        };
        let query = QueryBlock::new(POOL_SCENE_A, target);
        let same = ModelRequest::new(
            render_vanilla(&[shot("Is there a blue sphere in the image?", "yes")], &query)
                .unwrap(),
            "f/0",
        );
        let other = ModelRequest::new(
            render_vanilla(
                &[shot("What color is the cylinder to the right of the blue sphere?", "green")],
                &query,
            )
            .unwrap(),
            "f/0",
        );
        let p_same = backend.corruption_probability(&same).unwrap();
        let p_other = backend.corruption_probability(&other).unwrap();
        assert!(p_same < p_other, "same {p_same} vs other {p_other}");
    }

    #[test]
    fn completion_serves_scripted_decompositions() {
        let mut map = BTreeMap::new();
        map.insert(
            "Is the red cube behind the sphere?".to_string(),
            vec![
                "Is there a red cube in the image?".to_string(),
                "Is there a sphere in the image?".to_string(),
                "Is the red cube behind the sphere?".to_string(),
            ],
        );
        let backend = oracle(0.0, 1, true).with_decompositions(map);
        let prompt = "To answer the question: X?, we need to know: A?; B?\n\
To answer the question: Is the red cube behind the sphere?, we need to know:";
        let reply = backend.complete(prompt, "dc/1").unwrap();
        assert_eq!(
            reply.raw_text,
            "Is there a red cube in the image?; Is there a sphere in the image?; \
Is the red cube behind the sphere?"
        );
        assert!(backend
            .complete("To answer the question: Other?, we need to know:", "dc/2")
            .is_err());
        assert!(backend.complete("garbage", "dc/3").is_err());
    }
}
