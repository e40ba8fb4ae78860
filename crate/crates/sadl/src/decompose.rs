//! Question decomposition: the deliberation prompt, parsing of model
//! output into subquestions, a shallow noun-phrase difficulty estimate,
//! and assembly of ordered subquestion chains.

use serde::{Deserialize, Serialize};

use crate::dataset::QaPair;
use crate::error::{Error, Result};

pub const DEFAULT_M_MAX: usize = 8;

/// One step of a decomposition. `label` is filled by pseudo-labeling or
/// by sequential answering; gold chains carry labels from the start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainItem {
    pub subquestion: String,
    pub difficulty: usize,
    pub label: Option<String>,
}

/// An ordered subquestion chain for one source question. The last item is
/// the terminal step: the subquestion whose answer decides the source
/// question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubquestionChain {
    pub source_question: String,
    pub items: Vec<ChainItem>,
}

impl SubquestionChain {
    pub fn m(&self) -> usize {
        self.items.len()
    }

    pub fn terminal(&self) -> &ChainItem {
        self.items.last().expect("chains are never empty")
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.items.iter().all(|i| i.label.is_some())
    }

    pub fn subquestions(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.subquestion.as_str())
    }

    /// Difficulties are non-decreasing when built with increasing order.
    pub fn is_sorted_by_difficulty(&self) -> bool {
        self.items.windows(2).all(|w| w[0].difficulty <= w[1].difficulty)
    }
}

/// How subquestions are ordered inside a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingMode {
    /// Stable ascending sort by estimated difficulty.
    Increasing,
    /// Keep the decomposer's order untouched.
    Decomposer,
}

fn make_items(subquestions: Vec<(String, Option<String>)>) -> Vec<ChainItem> {
    subquestions
        .into_iter()
        .map(|(subquestion, label)| {
            let difficulty = count_significant_noun_phrases(&subquestion);
            ChainItem {
                subquestion,
                difficulty,
                label,
            }
        })
        .collect()
}

fn finish_chain(
    source_question: &str,
    mut items: Vec<ChainItem>,
    ordering: OrderingMode,
) -> Result<SubquestionChain> {
    if items.is_empty() {
        return Err(Error::EmptyDecomposition);
    }
    if let OrderingMode::Increasing = ordering {
        items.sort_by_key(|i| i.difficulty);
    }
    Ok(SubquestionChain {
        source_question: source_question.to_string(),
        items,
    })
}

/// Build an unlabeled chain from raw subquestions.
pub fn build_chain(
    source_question: &str,
    subquestions: Vec<String>,
    ordering: OrderingMode,
) -> Result<SubquestionChain> {
    finish_chain(
        source_question,
        make_items(subquestions.into_iter().map(|q| (q, None)).collect()),
        ordering,
    )
}

/// Build a labeled chain from subquestion/answer pairs; labels travel with
/// their subquestions through any reordering.
pub fn build_chain_with_labels(
    source_question: &str,
    pairs: &[QaPair],
    ordering: OrderingMode,
) -> Result<SubquestionChain> {
    finish_chain(
        source_question,
        make_items(
            pairs
                .iter()
                .map(|p| (p.question.clone(), Some(p.answer.clone())))
                .collect(),
        ),
        ordering,
    )
}

/// Stable ascending difficulty ordering; the hardest item ends up last
/// and is the terminal step.
pub fn rank_by_difficulty(
    source_question: &str,
    subquestions: Vec<String>,
) -> Result<SubquestionChain> {
    build_chain(source_question, subquestions, OrderingMode::Increasing)
}

/// One worked decomposition shown to the model before the target question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionExemplar {
    pub question: String,
    pub subquestions: Vec<String>,
}

/// Render the deliberation prompt. Each exemplar becomes one line
/// `To answer the question: <Q>, we need to know: <S1>; <S2>; ...; <Sm>`
/// and the final line repeats the pattern for the target question,
/// stopping after the colon.
pub fn build_decomposition_prompt(
    question: &str,
    exemplars: &[DecompositionExemplar],
) -> Result<String> {
    if exemplars.is_empty() {
        return Err(Error::validation(
            "decomposition prompt requires at least one exemplar",
        ));
    }
    if question.trim().is_empty() {
        return Err(Error::validation("cannot decompose an empty question"));
    }
    let mut lines = Vec::with_capacity(exemplars.len() + 1);
    for exemplar in exemplars {
        if exemplar.subquestions.is_empty() {
            return Err(Error::validation(format!(
                "exemplar '{}' has no subquestions",
                exemplar.question
            )));
        }
        lines.push(format!(
            "To answer the question: {}, we need to know: {}",
            exemplar.question,
            exemplar.subquestions.join("; ")
        ));
    }
    lines.push(format!(
        "To answer the question: {question}, we need to know:"
    ));
    Ok(lines.join("\n"))
}

fn split_numbered(text: &str) -> Option<Vec<String>> {
    let chars: Vec<char> = text.chars().collect();
    let mut marks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let at_boundary = i == 0 || chars[i - 1].is_whitespace();
        if at_boundary && chars[i].is_ascii_digit() {
            let mut j = i;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            if j < chars.len() && (chars[j] == '.' || chars[j] == ')') {
                marks.push(i);
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    if marks.is_empty() {
        return None;
    }
    let mut parts = Vec::new();
    for (k, start) in marks.iter().enumerate() {
        let end = marks.get(k + 1).copied().unwrap_or(chars.len());
        parts.push(chars[*start..end].iter().collect());
    }
    Some(parts)
}

fn clean_item(raw: &str) -> String {
    let mut s = raw.trim();
    s = s.trim_start_matches(|c: char| c.is_ascii_digit());
    s = s.trim_start_matches(['.', ')', '-', '*', '•']);
    s = s.trim();
    s.trim_matches(['"', '\'']).trim().to_string()
}

/// Extract subquestions from raw decomposer output. Splits on semicolons,
/// then numbered markers, then line bullets; items are trimmed, capped at
/// `m_max`, and get a trailing question mark when missing.
pub fn parse_decomposition(output: &str, m_max: usize) -> Result<Vec<String>> {
    if output.trim().is_empty() {
        return Err(Error::validation("decomposition output is empty"));
    }
    let raw_parts: Vec<String> = if output.contains(';') {
        output.split(';').map(|s| s.to_string()).collect()
    } else if let Some(parts) = split_numbered(output) {
        parts
    } else {
        output.lines().map(|s| s.to_string()).collect()
    };
    let mut items: Vec<String> = raw_parts
        .iter()
        .map(|p| clean_item(p))
        .filter(|p| !p.is_empty())
        .map(|mut p| {
            if !p.ends_with('?') {
                p.push('?');
            }
            p
        })
        .collect();
    if items.is_empty() {
        return Err(Error::EmptyDecomposition);
    }
    items.truncate(m_max.max(1));
    Ok(items)
}

const DETERMINERS: [&str; 12] = [
    "a", "an", "the", "this", "that", "these", "those", "every", "some", "any", "no", "each",
];

const PRONOUNS: [&str; 20] = [
    "it", "he", "she", "they", "them", "him", "her", "i", "you", "we", "us", "its", "his",
    "hers", "their", "theirs", "there", "who", "whom", "something",
];

const PREPOSITIONS: [&str; 27] = [
    "in", "on", "at", "of", "to", "from", "with", "by", "for", "under", "over", "near",
    "beside", "between", "above", "below", "into", "onto", "behind", "about", "against",
    "along", "across", "around", "through", "without", "within",
];

const AUXILIARIES: [&str; 24] = [
    "is", "are", "was", "were", "be", "been", "being", "am", "do", "does", "did", "can",
    "could", "will", "would", "shall", "should", "may", "might", "must", "has", "have", "had",
    "not",
];

const WH_WORDS: [&str; 7] = ["what", "which", "whose", "where", "when", "why", "how"];

const CONNECTIVES: [&str; 14] = [
    "and", "or", "but", "nor", "if", "than", "then", "as", "only", "also", "very", "so",
    "too", "both",
];

// Locative heads of complex prepositions ("to the left of"); they never
// anchor a noun phrase of their own.
const LOCATIVES: [&str; 10] = [
    "left", "right", "front", "back", "side", "top", "bottom", "middle", "rear", "center",
];

const EXCLUDED_PHRASES: [&str; 3] = ["the image", "the picture", "the photo"];

#[derive(PartialEq)]
enum TokenRole {
    Determiner,
    Closed,
    Noun,
}

fn classify(token: &str) -> TokenRole {
    if DETERMINERS.contains(&token) {
        return TokenRole::Determiner;
    }
    if PRONOUNS.contains(&token)
        || PREPOSITIONS.contains(&token)
        || AUXILIARIES.contains(&token)
        || WH_WORDS.contains(&token)
        || CONNECTIVES.contains(&token)
        || LOCATIVES.contains(&token)
    {
        return TokenRole::Closed;
    }
    // Inflected verbs break chunks; short words like "red" are spared.
    if token.len() > 4 && (token.ends_with("ing") || token.ends_with("ed")) {
        return TokenRole::Closed;
    }
    TokenRole::Noun
}

/// Count significant noun phrases with a deterministic shallow chunker:
/// maximal `determiner? noun+` runs over a closed-class lexicon, minus a
/// small boilerplate exclusion set. Unknown tokens act as nouns. Total on
/// arbitrary input.
pub fn count_significant_noun_phrases(text: &str) -> usize {
    let tokens: Vec<String> = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect();
    let mut count = 0;
    let mut i = 0;
    while i < tokens.len() {
        let start = i;
        let mut words: Vec<&str> = Vec::new();
        if classify(&tokens[i]) == TokenRole::Determiner {
            words.push(&tokens[i]);
            i += 1;
        }
        let mut nouns = 0;
        while i < tokens.len() && classify(&tokens[i]) == TokenRole::Noun {
            words.push(&tokens[i]);
            nouns += 1;
            i += 1;
        }
        if nouns == 0 {
            i = start + 1;
            continue;
        }
        let phrase = words.join(" ");
        if !EXCLUDED_PHRASES.contains(&phrase.as_str()) {
            count += 1;
        }
    }
    count
}
