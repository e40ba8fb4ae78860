//! Prompt assembly: interleaved image/text contexts for the four
//! strategies, character budgeting, and the label transforms used by the
//! ablations. Rendering is pure; the exact text layout is frozen by
//! golden files.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::QaPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vanilla,
    Cot,
    L2m,
    Sadl,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Cot => "cot",
            Strategy::L2m => "l2m",
            Strategy::Sadl => "sadl",
        }
    }

    pub const ALL: [Strategy; 4] = [Strategy::Vanilla, Strategy::Cot, Strategy::L2m, Strategy::Sadl];
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Deliberation content of one demonstration block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "content", rename_all = "snake_case")]
pub enum DeliberationBlock {
    CotRationale(Vec<String>),
    L2mSubproblems(Vec<String>),
    SadlLabeledChain(Vec<QaPair>),
}

impl DeliberationBlock {
    fn matches(&self, strategy: Strategy) -> bool {
        matches!(
            (self, strategy),
            (DeliberationBlock::CotRationale(_), Strategy::Cot)
                | (DeliberationBlock::L2mSubproblems(_), Strategy::L2m)
                | (DeliberationBlock::SadlLabeledChain(_), Strategy::Sadl)
        )
    }
}

/// Where a demonstration came from; specific shots carry their image
/// similarity so the budget rule can rank them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ShotOrigin {
    Generic,
    Specific { image_similarity: f64 },
}

/// One demonstration block: an image followed by its text lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    pub deliberation: Option<DeliberationBlock>,
    pub origin: ShotOrigin,
}

fn one_line(text: &str) -> String {
    text.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

impl Shot {
    fn lines(&self) -> Vec<String> {
        let question = one_line(&self.question);
        let answer = one_line(&self.answer);
        match &self.deliberation {
            None => vec![format!("Question: {question} Answer: {answer}")],
            Some(block) => {
                let mut lines = vec![format!("Question: {question}")];
                match block {
                    DeliberationBlock::CotRationale(steps) => {
                        lines.extend(steps.iter().map(|s| one_line(s)));
                    }
                    DeliberationBlock::L2mSubproblems(subs) => {
                        let joined: Vec<String> = subs.iter().map(|s| one_line(s)).collect();
                        lines.push(format!(
                            "To answer this, we need to know: {}",
                            joined.join("; ")
                        ));
                    }
                    DeliberationBlock::SadlLabeledChain(pairs) => {
                        for (j, pair) in pairs.iter().enumerate() {
                            lines.push(format!(
                                "Sub-question {}: {}",
                                j + 1,
                                one_line(&pair.question)
                            ));
                            lines.push(format!("Answer: {}", one_line(&pair.answer)));
                        }
                    }
                }
                lines.push(format!("Answer: {answer}"));
                lines
            }
        }
    }
}

/// The query block: the target image, optional injected ground truth,
/// already-answered subquestion pairs, and the unanswered marker line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBlock {
    pub image_ref: String,
    pub known: Option<QaPair>,
    pub answered: Vec<QaPair>,
    pub question: String,
}

impl QueryBlock {
    pub fn new(image_ref: impl Into<String>, question: impl Into<String>) -> Self {
        QueryBlock {
            image_ref: image_ref.into(),
            known: None,
            answered: Vec::new(),
            question: question.into(),
        }
    }

    fn lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        if let Some(known) = &self.known {
            lines.push(format!(
                "Known: {} Answer: {}",
                one_line(&known.question),
                one_line(&known.answer)
            ));
        }
        for (i, pair) in self.answered.iter().enumerate() {
            lines.push(format!("Sub-question {}: {}", i + 1, one_line(&pair.question)));
            lines.push(format!("Answer: {}", one_line(&pair.answer)));
        }
        lines.push(format!("Question: {} Answer:", one_line(&self.question)));
        lines
    }
}

/// One piece of the interleaved context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "lowercase")]
pub enum Segment {
    Image(String),
    Text(String),
}

/// The full context C: demonstration blocks then the query block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub strategy: Strategy,
    pub blocks: Vec<Shot>,
    pub query: QueryBlock,
}

impl PromptContext {
    pub fn shot_count(&self) -> usize {
        self.blocks.len()
    }

    /// Alternating image/text segments, one pair per block, query last.
    pub fn segments(&self) -> Vec<Segment> {
        let mut segments = Vec::with_capacity(2 * (self.blocks.len() + 1));
        for block in &self.blocks {
            segments.push(Segment::Image(block.image_ref.clone()));
            segments.push(Segment::Text(block.lines().join("\n")));
        }
        segments.push(Segment::Image(self.query.image_ref.clone()));
        segments.push(Segment::Text(self.query.lines().join("\n")));
        segments
    }

    /// The canonical text form: image segments become `[image: <ref>]`
    /// lines, blocks are separated by one blank line, and the text ends at
    /// the unanswered marker.
    pub fn rendered_text(&self) -> String {
        let mut parts = Vec::with_capacity(self.blocks.len() + 1);
        for block in &self.blocks {
            parts.push(format!(
                "[image: {}]\n{}",
                block.image_ref,
                block.lines().join("\n")
            ));
        }
        parts.push(format!(
            "[image: {}]\n{}",
            self.query.image_ref,
            self.query.lines().join("\n")
        ));
        parts.join("\n\n")
    }

    pub fn char_len(&self) -> usize {
        self.rendered_text().chars().count()
    }

    fn query_only_len(&self) -> usize {
        PromptContext {
            strategy: self.strategy,
            blocks: Vec::new(),
            query: self.query.clone(),
        }
        .char_len()
    }
}

fn check_query(query: &QueryBlock) -> Result<()> {
    if query.question.trim().is_empty() {
        return Err(Error::validation("query question is empty"));
    }
    if query.image_ref.trim().is_empty() {
        return Err(Error::validation("query image_ref is empty"));
    }
    Ok(())
}

/// Image/question/answer blocks only; shots must not carry deliberation.
pub fn render_vanilla(shots: &[Shot], query: &QueryBlock) -> Result<PromptContext> {
    check_query(query)?;
    for shot in shots {
        if shot.deliberation.is_some() {
            return Err(Error::validation(format!(
                "vanilla rendering got a deliberation block on shot '{}'",
                shot.image_ref
            )));
        }
    }
    Ok(PromptContext {
        strategy: Strategy::Vanilla,
        blocks: shots.to_vec(),
        query: query.clone(),
    })
}

/// CoT, L2M, or SADL rendering; every shot must carry a deliberation
/// block of the strategy's kind.
pub fn render_deliberate(
    shots: &[Shot],
    query: &QueryBlock,
    strategy: Strategy,
) -> Result<PromptContext> {
    check_query(query)?;
    if strategy == Strategy::Vanilla {
        return Err(Error::validation(
            "render_deliberate does not accept the vanilla strategy",
        ));
    }
    for shot in shots {
        match &shot.deliberation {
            Some(block) if block.matches(strategy) => {}
            Some(_) => {
                return Err(Error::validation(format!(
                    "shot '{}' deliberation kind does not match strategy {strategy}",
                    shot.image_ref
                )))
            }
            None => {
                return Err(Error::validation(format!(
                    "shot '{}' has no deliberation block for strategy {strategy}",
                    shot.image_ref
                )))
            }
        }
    }
    Ok(PromptContext {
        strategy,
        blocks: shots.to_vec(),
        query: query.clone(),
    })
}

/// Drop whole query-specific blocks, lowest image similarity first, until
/// the rendered text fits `max_chars`. Generic blocks and the query are
/// never dropped.
pub fn enforce_budget(context: PromptContext, max_chars: usize) -> Result<PromptContext> {
    let query_len = context.query_only_len();
    if max_chars <= query_len {
        return Err(Error::validation(format!(
            "budget {max_chars} does not exceed the query block size {query_len}"
        )));
    }
    let mut context = context;
    while context.char_len() > max_chars {
        let mut victim: Option<(usize, f64)> = None;
        for (i, block) in context.blocks.iter().enumerate() {
            if let ShotOrigin::Specific { image_similarity } = block.origin {
                let lower = match victim {
                    None => true,
                    // Ties drop the later block, keeping earlier ones.
                    Some((_, best)) => image_similarity <= best,
                };
                if lower {
                    victim = Some((i, image_similarity));
                }
            }
        }
        match victim {
            Some((i, _)) => {
                context.blocks.remove(i);
            }
            None => {
                return Err(Error::validation(format!(
                    "context does not fit budget {max_chars} even with every \
query-specific block dropped ({} chars remain)",
                    context.char_len()
                )))
            }
        }
    }
    Ok(context)
}

/// Seeded label permutation for the shuffle ablation: answers move between
/// pair positions; a non-identity permutation is forced when possible.
pub fn shuffle_chain_labels(pairs: &mut [QaPair], rng: &mut impl Rng) {
    let n = pairs.len();
    if n < 2 {
        return;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    // Fisher-Yates; retry the identity once by rotating.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.rotate_left(1);
    }
    let answers: Vec<String> = pairs.iter().map(|p| p.answer.clone()).collect();
    for (i, pair) in pairs.iter_mut().enumerate() {
        pair.answer = answers[perm[i]].clone();
    }
}

/// Replace every label with a fixed placeholder (the "unknown" ablation).
pub fn blank_chain_labels(pairs: &mut [QaPair], placeholder: &str) {
    for pair in pairs.iter_mut() {
        pair.answer = placeholder.to_string();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qa(q: &str, a: &str) -> QaPair {
        QaPair {
            question: q.to_string(),
            answer: a.to_string(),
        }
    }

    fn vanilla_shot(image: &str, q: &str, a: &str) -> Shot {
        Shot {
            image_ref: image.to_string(),
            question: q.to_string(),
            answer: a.to_string(),
            deliberation: None,
            origin: ShotOrigin::Generic,
        }
    }

    fn sadl_shot(image: &str, sim: f64) -> Shot {
        Shot {
            image_ref: image.to_string(),
            question: "Is the red cube behind the sphere?".to_string(),
            answer: "yes".to_string(),
            deliberation: Some(DeliberationBlock::SadlLabeledChain(vec![
                qa("Is there a red cube in the image?", "yes"),
                qa("Is there a sphere in the image?", "yes"),
                qa("Is the red cube behind the sphere?", "yes"),
            ])),
            origin: ShotOrigin::Specific {
                image_similarity: sim,
            },
        }
    }

    #[test]
    fn vanilla_layout_is_fixed() {
        let shots = vec![
            vanilla_shot("img/a.png", "Is there a dog?", "yes"),
            vanilla_shot("img/b.png", "What color is the cat?", "gray"),
        ];
        let query = QueryBlock::new("img/q.png", "Is there a bird?");
        let context = render_vanilla(&shots, &query).unwrap();
        let expected = "[image: img/a.png]\nQuestion: Is there a dog? Answer: yes\n\n\
[image: img/b.png]\nQuestion: What color is the cat? Answer: gray\n\n\
[image: img/q.png]\nQuestion: Is there a bird? Answer:";
        assert_eq!(context.rendered_text(), expected);
        let images = context
            .segments()
            .iter()
            .filter(|s| matches!(s, Segment::Image(_)))
            .count();
        assert_eq!(images, 3);
        assert_eq!(context.shot_count(), 2);
    }

    #[test]
    fn zero_shots_renders_query_only() {
        let query = QueryBlock::new("img/q.png", "Is there a bird?");
        let context = render_vanilla(&[], &query).unwrap();
        assert_eq!(
            context.rendered_text(),
            "[image: img/q.png]\nQuestion: Is there a bird? Answer:"
        );
    }

    #[test]
    fn newlines_in_payloads_become_spaces() {
        let shots = vec![vanilla_shot("img/a.png", "Is there\na dog?", "ye\r\ns")];
        let query = QueryBlock::new("img/q.png", "Q?");
        let context = render_vanilla(&shots, &query).unwrap();
        assert!(context
            .rendered_text()
            .starts_with("[image: img/a.png]\nQuestion: Is there a dog? Answer: ye s"));
    }

    #[test]
    fn rendered_text_ends_at_the_marker() {
        let query = QueryBlock::new("img/q.png", "Is there a bird?");
        let context = render_deliberate(&[sadl_shot("img/a.png", 0.5)], &query, Strategy::Sadl)
            .unwrap();
        let text = context.rendered_text();
        assert!(text.ends_with("Answer:"));
        assert!(!text.ends_with('\n'));
    }

    #[test]
    fn sadl_blocks_keep_pairs_adjacent() {
        let query = QueryBlock::new("img/q.png", "Q?");
        let context =
            render_deliberate(&[sadl_shot("img/a.png", 0.5)], &query, Strategy::Sadl).unwrap();
        let text = context.rendered_text();
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if line.starts_with("Sub-question ") {
                assert!(
                    lines[i + 1].starts_with("Answer: "),
                    "label line must immediately follow its subquestion"
                );
            }
        }
        // Three pairs then the block answer line.
        assert_eq!(text.matches("Sub-question ").count(), 3);
        assert_eq!(text.matches("\nAnswer: ").count(), 4);
    }

    #[test]
    fn cot_rationale_lines_sit_between_question_and_answer() {
        let shot = Shot {
            image_ref: "img/a.png".to_string(),
            question: "Q1?".to_string(),
            answer: "yes".to_string(),
            deliberation: Some(DeliberationBlock::CotRationale(vec![
                "Step 1: look left.".to_string(),
                "Step 2: compare.".to_string(),
            ])),
            origin: ShotOrigin::Generic,
        };
        let query = QueryBlock::new("img/q.png", "Q?");
        let context = render_deliberate(&[shot], &query, Strategy::Cot).unwrap();
        let expected = "[image: img/a.png]\nQuestion: Q1?\nStep 1: look left.\n\
Step 2: compare.\nAnswer: yes\n\n[image: img/q.png]\nQuestion: Q? Answer:";
        assert_eq!(context.rendered_text(), expected);
    }

    #[test]
    fn l2m_blocks_list_subproblems_on_one_line() {
        let shot = Shot {
            image_ref: "img/a.png".to_string(),
            question: "Q1?".to_string(),
            answer: "no".to_string(),
            deliberation: Some(DeliberationBlock::L2mSubproblems(vec![
                "A?".to_string(),
                "B?".to_string(),
            ])),
            origin: ShotOrigin::Generic,
        };
        let query = QueryBlock::new("img/q.png", "Q?");
        let context = render_deliberate(&[shot], &query, Strategy::L2m).unwrap();
        assert!(context
            .rendered_text()
            .contains("Question: Q1?\nTo answer this, we need to know: A?; B?\nAnswer: no"));
    }

    #[test]
    fn query_prelude_renders_known_then_pairs() {
        let mut query = QueryBlock::new("img/q.png", "Is the red cube behind the sphere?");
        query.known = Some(qa("Is the red cube behind the sphere?", "yes"));
        query.answered = vec![qa("Is there a red cube in the image?", "yes")];
        let context = render_vanilla(&[], &query).unwrap();
        let expected = "[image: img/q.png]\n\
Known: Is the red cube behind the sphere? Answer: yes\n\
Sub-question 1: Is there a red cube in the image?\nAnswer: yes\n\
Question: Is the red cube behind the sphere? Answer:";
        assert_eq!(context.rendered_text(), expected);
    }

    #[test]
    fn kind_and_strategy_mismatches_are_rejected() {
        let query = QueryBlock::new("img/q.png", "Q?");
        let sadl = sadl_shot("img/a.png", 0.1);
        assert!(render_deliberate(&[sadl.clone()], &query, Strategy::Cot).is_err());
        assert!(render_deliberate(&[sadl.clone()], &query, Strategy::Vanilla).is_err());
        assert!(render_vanilla(&[sadl], &query).is_err());
        let bare = vanilla_shot("img/a.png", "Q1?", "yes");
        assert!(render_deliberate(&[bare], &query, Strategy::Sadl).is_err());
        assert!(render_vanilla(&[], &QueryBlock::new("img/q.png", "  ")).is_err());
    }

    #[test]
    fn budget_identity_when_under() {
        let query = QueryBlock::new("img/q.png", "Q?");
        let context =
            render_deliberate(&[sadl_shot("img/a.png", 0.9)], &query, Strategy::Sadl).unwrap();
        let len = context.char_len();
        let kept = enforce_budget(context.clone(), len).unwrap();
        assert_eq!(kept, context);
    }

    #[test]
    fn budget_drops_lowest_similarity_specific_block_first() {
        let query = QueryBlock::new("img/q.png", "Q?");
        let shots = vec![sadl_shot("img/hi.png", 0.9), sadl_shot("img/lo.png", 0.2)];
        let context = render_deliberate(&shots, &query, Strategy::Sadl).unwrap();
        let one_block = render_deliberate(&shots[..1], &query, Strategy::Sadl)
            .unwrap()
            .char_len();
        let trimmed = enforce_budget(context, one_block).unwrap();
        assert_eq!(trimmed.blocks.len(), 1);
        assert_eq!(trimmed.blocks[0].image_ref, "img/hi.png");
    }

    #[test]
    fn budget_never_drops_generic_blocks() {
        let query = QueryBlock::new("img/q.png", "Q?");
        let mut generic = sadl_shot("img/gen.png", 0.0);
        generic.origin = ShotOrigin::Generic;
        let shots = vec![generic, sadl_shot("img/spec.png", 0.99)];
        let context = render_deliberate(&shots, &query, Strategy::Sadl).unwrap();
        let query_len = render_vanilla(&[], &query).unwrap().char_len();
        // Budget forces dropping everything droppable, then errors because
        // the generic block still does not fit.
        let err = enforce_budget(context.clone(), query_len + 8).unwrap_err();
        assert!(err.to_string().contains("every"));
        // A budget that fits query + generic keeps the generic block.
        let fits = render_deliberate(&context.blocks[..1], &query, Strategy::Sadl)
            .unwrap()
            .char_len();
        let trimmed = enforce_budget(context, fits).unwrap();
        assert_eq!(trimmed.blocks.len(), 1);
        assert_eq!(trimmed.blocks[0].image_ref, "img/gen.png");
    }

    #[test]
    fn budget_below_query_size_is_an_error() {
        let query = QueryBlock::new("img/q.png", "Q?");
        let context = render_vanilla(&[], &query).unwrap();
        let len = context.char_len();
        assert!(enforce_budget(context, len).is_err());
    }

    // Exhaustive subset reference for the budget rule on small shot sets
    // with near-uniform block sizes: the greedy result must fit, drop the
    // minimum possible number of blocks, and prefer dropping low
    // similarity.
    #[test]
    fn budget_matches_exhaustive_minimal_drop_on_uniform_blocks() {
        let query = QueryBlock::new("img/q.png", "Q?");
        let sims = [0.81, 0.34, 0.55, 0.92];
        let shots: Vec<Shot> = sims
            .iter()
            .enumerate()
            .map(|(i, s)| sadl_shot(&format!("img/s{i}.png"), *s))
            .collect();
        let context = render_deliberate(&shots, &query, Strategy::Sadl).unwrap();
        let full = context.char_len();
        let query_len = render_vanilla(&[], &query).unwrap().char_len();
        for budget in (query_len + 1)..=(full + 4) {
            let greedy = enforce_budget(context.clone(), budget);
            // Reference: try all 2^4 keep-subsets.
            let mut best: Option<(usize, Vec<usize>)> = None;
            for mask in 0u32..16 {
                let kept: Vec<Shot> = (0..4)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i: usize| shots[i].clone())
                    .collect();
                let kept_idx: Vec<usize> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
                let len = render_deliberate(&kept, &query, Strategy::Sadl)
                    .unwrap()
                    .char_len();
                if len <= budget {
                    let drops = 4 - kept.len();
                    let better = match &best {
                        None => true,
                        Some((d, _)) => drops < *d,
                    };
                    if better {
                        best = Some((drops, kept_idx));
                    }
                }
            }
            match (greedy, best) {
                (Ok(result), Some((min_drops, _))) => {
                    assert!(result.char_len() <= budget);
                    assert_eq!(4 - result.blocks.len(), min_drops, "budget {budget}");
                    // Dropped blocks are exactly the lowest-similarity ones.
                    let mut expected: Vec<usize> = (0..4).collect();
                    expected.sort_by(|a, b| sims[*b].total_cmp(&sims[*a]));
                    let keep: std::collections::BTreeSet<String> = expected
                        [..4 - min_drops]
                        .iter()
                        .map(|i| format!("img/s{i}.png"))
                        .collect();
                    let got: std::collections::BTreeSet<String> =
                        result.blocks.iter().map(|b| b.image_ref.clone()).collect();
                    assert_eq!(got, keep, "budget {budget}");
                }
                (Err(_), None) => {}
                (greedy, best) => panic!(
                    "greedy and reference disagree at budget {budget}: {:?} vs {:?}",
                    greedy.map(|c| c.blocks.len()),
                    best
                ),
            }
        }
    }

    #[test]
    fn shuffle_is_seeded_and_non_identity() {
        let mut pairs = vec![qa("a?", "yes"), qa("b?", "no"), qa("c?", "green")];
        let original = pairs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        shuffle_chain_labels(&mut pairs, &mut rng);
        let answers: Vec<&str> = pairs.iter().map(|p| p.answer.as_str()).collect();
        let before: Vec<&str> = original.iter().map(|p| p.answer.as_str()).collect();
        assert_ne!(answers, before);
        let mut sorted_a = answers.clone();
        let mut sorted_b = before.clone();
        sorted_a.sort_unstable();
        sorted_b.sort_unstable();
        assert_eq!(sorted_a, sorted_b, "shuffle must be a permutation");
        // Questions untouched.
        for (p, o) in pairs.iter().zip(original.iter()) {
            assert_eq!(p.question, o.question);
        }
        // Same seed, same permutation.
        let mut again = original.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        shuffle_chain_labels(&mut again, &mut rng);
        assert_eq!(again, pairs);
    }

    #[test]
    fn blanking_labels_sets_the_placeholder_everywhere() {
        let mut pairs = vec![qa("a?", "yes"), qa("b?", "green")];
        blank_chain_labels(&mut pairs, "unknown");
        assert!(pairs.iter().all(|p| p.answer == "unknown"));
    }

    #[test]
    fn context_serializes_round_trip() {
        let query = QueryBlock::new("img/q.png", "Q?");
        let context =
            render_deliberate(&[sadl_shot("img/a.png", 0.4)], &query, Strategy::Sadl).unwrap();
        let json = serde_json::to_string(&context).unwrap();
        let back: PromptContext = serde_json::from_str(&json).unwrap();
        assert_eq!(back, context);
        assert_eq!(back.rendered_text(), context.rendered_text());
    }
}
