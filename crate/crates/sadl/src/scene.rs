//! Question grammar over scene graphs: parsing the closed question forms
//! used by the synthetic corpus and evaluating them exhaustively against a
//! [`SceneGraph`].
//!
//! The grammar covers four question shapes: existence (optionally with a
//! relational clause), relation verification, attribute queries, and
//! category queries. Noun phrases are `[size] [color] [material] category`
//! with an optional one-level qualifier ("the person holding the umbrella",
//! "the sphere that is behind the green cylinder").

use std::collections::BTreeSet;

use crate::dataset::{SceneGraph, SceneObject};
use crate::normalize::normalize_answer;

pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "purple", "gray", "brown", "cyan",
];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const MATERIALS: [&str; 2] = ["metal", "rubber"];

/// Reply used whenever a question cannot be parsed or resolved.
pub const UNRESOLVED: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    LeftOf,
    RightOf,
    Behind,
    InFrontOf,
    Holding,
}

impl Predicate {
    /// The predicate string stored in scene-graph relation triples.
    pub fn as_str(&self) -> &'static str {
        match self {
            Predicate::LeftOf => "left of",
            Predicate::RightOf => "right of",
            Predicate::Behind => "behind",
            Predicate::InFrontOf => "in front of",
            Predicate::Holding => "holding",
        }
    }

    /// The surface form used inside questions.
    pub fn phrase(&self) -> &'static str {
        match self {
            Predicate::LeftOf => "to the left of",
            Predicate::RightOf => "to the right of",
            Predicate::Behind => "behind",
            Predicate::InFrontOf => "in front of",
            Predicate::Holding => "holding",
        }
    }
}

/// A noun phrase: optional closed-class attributes, a category (or the
/// wildcard "object"), and an optional relational qualifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounPhrase {
    pub size: Option<String>,
    pub color: Option<String>,
    pub material: Option<String>,
    pub category: String,
    pub qualifier: Option<Box<(Predicate, NounPhrase)>>,
}

pub const WILDCARD: &str = "*";

impl NounPhrase {
    fn bare(category: &str) -> Self {
        NounPhrase {
            size: None,
            color: None,
            material: None,
            category: category.to_string(),
            qualifier: None,
        }
    }

    /// Canonical text for fact identities, ignoring the qualifier.
    pub fn canon(&self) -> String {
        let mut parts = Vec::new();
        for attr in [&self.size, &self.color, &self.material].into_iter().flatten() {
            parts.push(attr.as_str());
        }
        parts.push(&self.category);
        parts.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeKind {
    Color,
    Size,
    Material,
}

impl AttributeKind {
    pub fn word(&self) -> &'static str {
        match self {
            AttributeKind::Color => "color",
            AttributeKind::Size => "size",
            AttributeKind::Material => "material",
        }
    }

    fn value_set(&self) -> &'static [&'static str] {
        match self {
            AttributeKind::Color => &COLORS,
            AttributeKind::Size => &SIZES,
            AttributeKind::Material => &MATERIALS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedQuestion {
    Exists {
        target: NounPhrase,
        relation: Option<(Predicate, NounPhrase)>,
    },
    Verify {
        subject: NounPhrase,
        predicate: Predicate,
        object: NounPhrase,
    },
    QueryAttribute {
        kind: AttributeKind,
        target: NounPhrase,
        relation: Option<(Predicate, NounPhrase)>,
    },
    QueryCategory {
        target: NounPhrase,
        predicate: Predicate,
        anchor: NounPhrase,
    },
}

impl ParsedQuestion {
    /// Coarse question family used for reporting and context analysis.
    pub fn family(&self) -> &'static str {
        match self {
            ParsedQuestion::Exists { relation: None, .. } => "exists",
            ParsedQuestion::Exists {
                relation: Some((_, anchor)),
                ..
            } => {
                if anchor.qualifier.is_some() {
                    "exists-rel-nested"
                } else {
                    "exists-rel"
                }
            }
            ParsedQuestion::Verify { .. } => "verify",
            ParsedQuestion::QueryAttribute { .. } => "query-attr",
            ParsedQuestion::QueryCategory { .. } => "query-cat",
        }
    }
}

fn singular(word: &str) -> String {
    match word {
        "men" => "man".to_string(),
        "women" => "woman".to_string(),
        "people" => "person".to_string(),
        "children" => "child".to_string(),
        w if w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") => w[..w.len() - 1].to_string(),
        w => w.to_string(),
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

struct Cursor<'a> {
    tokens: &'a [String],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(|s| s.as_str())
    }

    fn eat(&mut self, word: &str) -> bool {
        if self.peek() == Some(word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_seq(&mut self, words: &[&str]) -> bool {
        if self.tokens.len() - self.pos >= words.len()
            && words
                .iter()
                .enumerate()
                .all(|(i, w)| self.tokens[self.pos + i] == *w)
        {
            self.pos += words.len();
            true
        } else {
            false
        }
    }

    fn done(&self) -> bool {
        self.pos == self.tokens.len()
    }
}

fn parse_predicate(c: &mut Cursor) -> Option<Predicate> {
    let start = c.pos;
    c.eat("positioned");
    if c.eat_seq(&["to", "the", "left", "of"]) {
        return Some(Predicate::LeftOf);
    }
    if c.eat_seq(&["to", "the", "right", "of"]) {
        return Some(Predicate::RightOf);
    }
    if c.eat_seq(&["in", "front", "of"]) {
        return Some(Predicate::InFrontOf);
    }
    if c.eat("behind") {
        return Some(Predicate::Behind);
    }
    if c.eat("holding") {
        return Some(Predicate::Holding);
    }
    c.pos = start;
    None
}

fn is_attribute(word: &str) -> bool {
    COLORS.contains(&word) || SIZES.contains(&word) || MATERIALS.contains(&word)
}

fn parse_noun_phrase(c: &mut Cursor, allow_qualifier: bool) -> Option<NounPhrase> {
    let mut np = NounPhrase::bare("");
    while let Some(word) = c.peek() {
        if COLORS.contains(&word) && np.color.is_none() {
            np.color = Some(word.to_string());
        } else if SIZES.contains(&word) && np.size.is_none() {
            np.size = Some(word.to_string());
        } else if MATERIALS.contains(&word) && np.material.is_none() {
            np.material = Some(word.to_string());
        } else {
            break;
        }
        c.pos += 1;
    }
    let head = c.peek()?;
    if is_attribute(head) {
        return None;
    }
    np.category = if head == "object" || head == "thing" {
        WILDCARD.to_string()
    } else {
        singular(head)
    };
    c.pos += 1;
    if allow_qualifier {
        let start = c.pos;
        let qualified = (|| {
            let relative = c.eat_seq(&["that", "is"]);
            let predicate = parse_predicate(c)?;
            if !relative && predicate != Predicate::Holding {
                return None;
            }
            if !(c.eat("the") || c.eat("a") || c.eat("an")) {
                return None;
            }
            let inner = parse_noun_phrase(c, false)?;
            Some((predicate, inner))
        })();
        match qualified {
            Some((predicate, inner)) => {
                np.qualifier = Some(Box::new((predicate, inner)));
            }
            None => c.pos = start,
        }
    }
    Some(np)
}

fn parse_relclause(c: &mut Cursor) -> Option<(Predicate, NounPhrase)> {
    let start = c.pos;
    let clause = (|| {
        let predicate = parse_predicate(c)?;
        if !(c.eat("the") || c.eat("a") || c.eat("an")) {
            return None;
        }
        let anchor = parse_noun_phrase(c, true)?;
        Some((predicate, anchor))
    })();
    if clause.is_none() {
        c.pos = start;
    }
    clause
}

fn strip_image_suffix(tokens: &mut Vec<String>) {
    for suffix in [
        &["present", "in", "the", "image"][..],
        &["in", "the", "image"][..],
    ] {
        if tokens.len() > suffix.len()
            && tokens[tokens.len() - suffix.len()..]
                .iter()
                .zip(suffix.iter())
                .all(|(t, s)| t == s)
        {
            tokens.truncate(tokens.len() - suffix.len());
            return;
        }
    }
}

/// Parse a question into the closed grammar, or `None` if it does not fit.
pub fn parse_question(text: &str) -> Option<ParsedQuestion> {
    let mut tokens = tokenize(text);
    strip_image_suffix(&mut tokens);
    let mut c = Cursor {
        tokens: &tokens,
        pos: 0,
    };

    if c.eat_seq(&["is", "there"]) || c.eat_seq(&["are", "there"]) {
        let _ = c.eat("a") || c.eat("an");
        let target = parse_noun_phrase(&mut c, false)?;
        let relation = parse_relclause(&mut c);
        if !c.done() {
            return None;
        }
        return Some(ParsedQuestion::Exists { target, relation });
    }

    if c.eat_seq(&["is", "the"]) || c.eat_seq(&["are", "the"]) {
        let subject = parse_noun_phrase(&mut c, false)?;
        if c.done() {
            return Some(ParsedQuestion::Exists {
                target: subject,
                relation: None,
            });
        }
        let predicate = parse_predicate(&mut c)?;
        if !(c.eat("the") || c.eat("a") || c.eat("an")) {
            return None;
        }
        let object = parse_noun_phrase(&mut c, true)?;
        if !c.done() {
            return None;
        }
        return Some(ParsedQuestion::Verify {
            subject,
            predicate,
            object,
        });
    }

    if c.eat("what") {
        let kind = match c.peek() {
            Some("color") => Some(AttributeKind::Color),
            Some("size") => Some(AttributeKind::Size),
            Some("material") => Some(AttributeKind::Material),
            _ => None,
        };
        if let Some(kind) = kind {
            c.pos += 1;
            if !c.eat_seq(&["is", "the"]) {
                return None;
            }
            let target = parse_noun_phrase(&mut c, false)?;
            let relation = parse_relclause(&mut c);
            if !c.done() {
                return None;
            }
            return Some(ParsedQuestion::QueryAttribute {
                kind,
                target,
                relation,
            });
        }
        if c.eat_seq(&["is", "the"]) {
            let target = parse_noun_phrase(&mut c, false)?;
            let (predicate, anchor) = parse_relclause(&mut c)?;
            if !c.done() {
                return None;
            }
            return Some(ParsedQuestion::QueryCategory {
                target,
                predicate,
                anchor,
            });
        }
    }

    None
}

fn category_matches(object: &SceneObject, category: &str) -> bool {
    category == WILDCARD || object.category == category
}

fn matches_np<'g>(graph: &'g SceneGraph, np: &NounPhrase) -> Vec<&'g SceneObject> {
    graph
        .objects
        .iter()
        .filter(|o| {
            category_matches(o, &np.category)
                && [&np.size, &np.color, &np.material]
                    .into_iter()
                    .flatten()
                    .all(|attr| o.attributes.contains(attr))
                && match &np.qualifier {
                    None => true,
                    Some(q) => {
                        let (pred, inner) = q.as_ref();
                        matches_np(graph, inner).iter().any(|target| {
                            graph.has_relation(&o.object_id, pred.as_str(), &target.object_id)
                        })
                    }
                }
        })
        .collect()
}

fn related_pair_exists(
    graph: &SceneGraph,
    subjects: &[&SceneObject],
    predicate: Predicate,
    objects: &[&SceneObject],
) -> bool {
    subjects.iter().any(|s| {
        objects
            .iter()
            .any(|o| graph.has_relation(&s.object_id, predicate.as_str(), &o.object_id))
    })
}

fn yes_no(v: bool) -> String {
    if v { "yes" } else { "no" }.to_string()
}

/// Evaluate a parsed question against a scene graph by exhaustive matching.
/// Resolution failures (no unique referent, missing attribute) yield
/// [`UNRESOLVED`].
pub fn evaluate(graph: &SceneGraph, question: &ParsedQuestion) -> String {
    match question {
        ParsedQuestion::Exists { target, relation } => {
            let targets = matches_np(graph, target);
            match relation {
                None => yes_no(!targets.is_empty()),
                Some((predicate, anchor)) => {
                    let anchors = matches_np(graph, anchor);
                    yes_no(related_pair_exists(graph, &targets, *predicate, &anchors))
                }
            }
        }
        ParsedQuestion::Verify {
            subject,
            predicate,
            object,
        } => {
            let subjects = matches_np(graph, subject);
            let objects = matches_np(graph, object);
            yes_no(related_pair_exists(graph, &subjects, *predicate, &objects))
        }
        ParsedQuestion::QueryAttribute {
            kind,
            target,
            relation,
        } => {
            let mut candidates = matches_np(graph, target);
            if let Some((predicate, anchor)) = relation {
                let anchors = matches_np(graph, anchor);
                candidates.retain(|c| {
                    anchors
                        .iter()
                        .any(|a| graph.has_relation(&c.object_id, predicate.as_str(), &a.object_id))
                });
            }
            if candidates.len() != 1 {
                return UNRESOLVED.to_string();
            }
            candidates[0]
                .attributes
                .iter()
                .find(|a| kind.value_set().contains(&a.as_str()))
                .cloned()
                .unwrap_or_else(|| UNRESOLVED.to_string())
        }
        ParsedQuestion::QueryCategory {
            target,
            predicate,
            anchor,
        } => {
            let anchors = matches_np(graph, anchor);
            let candidates: Vec<_> = matches_np(graph, target)
                .into_iter()
                .filter(|c| {
                    anchors
                        .iter()
                        .any(|a| graph.has_relation(&c.object_id, predicate.as_str(), &a.object_id))
                })
                .collect();
            if candidates.len() != 1 {
                return UNRESOLVED.to_string();
            }
            candidates[0].category.clone()
        }
    }
}

/// Parse and evaluate; unparseable questions yield [`UNRESOLVED`].
pub fn answer_question(graph: &SceneGraph, text: &str) -> String {
    match parse_question(text) {
        Some(q) => evaluate(graph, &q),
        None => UNRESOLVED.to_string(),
    }
}

fn np_facts(np: &NounPhrase, out: &mut BTreeSet<String>) {
    out.insert(format!("obj:{}", np.canon()));
    if let Some(q) = &np.qualifier {
        let (pred, inner) = q.as_ref();
        np_facts(inner, out);
        out.insert(format!(
            "rel:{}|{}|{}",
            np.canon(),
            pred.as_str(),
            inner.canon()
        ));
    }
}

/// The facts a question presupposes, excluding the atomic lookup that
/// produces its answer. An atomic existence question has no support facts.
pub fn support_facts(question: &ParsedQuestion) -> BTreeSet<String> {
    let mut facts = BTreeSet::new();
    match question {
        ParsedQuestion::Exists { relation: None, .. } => {}
        ParsedQuestion::Exists {
            target,
            relation: Some((_, anchor)),
        } => {
            np_facts(target, &mut facts);
            np_facts(anchor, &mut facts);
        }
        ParsedQuestion::Verify {
            subject, object, ..
        } => {
            np_facts(subject, &mut facts);
            np_facts(object, &mut facts);
        }
        ParsedQuestion::QueryAttribute {
            target, relation, ..
        } => {
            np_facts(target, &mut facts);
            if let Some((predicate, anchor)) = relation {
                np_facts(anchor, &mut facts);
                facts.insert(format!(
                    "rel:{}|{}|{}",
                    target.canon(),
                    predicate.as_str(),
                    anchor.canon()
                ));
            }
        }
        ParsedQuestion::QueryCategory {
            target,
            predicate,
            anchor,
        } => {
            np_facts(anchor, &mut facts);
            facts.insert(format!(
                "rel:{}|{}|{}",
                target.canon(),
                predicate.as_str(),
                anchor.canon()
            ));
        }
    }
    facts
}

/// The facts a correctly answered question establishes. Negative and
/// unresolved answers establish nothing.
pub fn asserted_facts(question: &ParsedQuestion, answer: &str) -> BTreeSet<String> {
    let normalized = normalize_answer(answer);
    let mut facts = BTreeSet::new();
    match question {
        ParsedQuestion::Exists { target, relation } => {
            if normalized == "yes" {
                facts = support_facts(question);
                np_facts(target, &mut facts);
                if let Some((predicate, anchor)) = relation {
                    facts.insert(format!(
                        "rel:{}|{}|{}",
                        target.canon(),
                        predicate.as_str(),
                        anchor.canon()
                    ));
                }
            }
        }
        ParsedQuestion::Verify {
            subject,
            predicate,
            object,
        } => {
            if normalized == "yes" {
                facts = support_facts(question);
                facts.insert(format!(
                    "rel:{}|{}|{}",
                    subject.canon(),
                    predicate.as_str(),
                    object.canon()
                ));
            }
        }
        ParsedQuestion::QueryAttribute { .. } | ParsedQuestion::QueryCategory { .. } => {
            if normalized != UNRESOLVED && !normalized.is_empty() {
                facts = support_facts(question);
            }
        }
    }
    facts
}

/// Number of atomic lookups needed to answer the question cold: one for
/// the answer itself plus one per support fact.
pub fn atomic_depth(question: &ParsedQuestion) -> usize {
    1 + support_facts(question).len()
}
