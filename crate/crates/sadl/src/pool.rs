//! The query-generic demonstration pool: a small fixed set of fully
//! annotated exemplars shared by every query, plus shot-set assembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::QaPair;
use crate::decompose::{build_chain_with_labels, OrderingMode, SubquestionChain};
use crate::error::{Error, Result};
use crate::index::{SamplingConfig, SelectedDemo};
use crate::normalize::normalize_answer;
use crate::dataset::{SceneGraph, SceneObject, SceneRelation};

/// A hand-annotated exemplar: the full question, its answer, and a manual
/// subquestion/answer decomposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolAnnotation {
    pub id: String,
    pub image_ref: String,
    pub caption: String,
    pub question: String,
    pub answer: String,
    pub subquestions: Vec<QaPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericDemo {
    pub id: String,
    pub image_ref: String,
    pub caption: String,
    pub question: String,
    pub answer: String,
    pub chain: SubquestionChain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericDemoPool {
    demos: Vec<GenericDemo>,
}

impl GenericDemoPool {
    pub fn demos(&self) -> &[GenericDemo] {
        &self.demos
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// First k1 demos in fixed pool order.
    pub fn take(&self, k1: usize) -> Result<&[GenericDemo]> {
        if k1 > self.demos.len() {
            return Err(Error::config(format!(
                "generic pool has {} demos but k1 = {k1}",
                self.demos.len()
            )));
        }
        Ok(&self.demos[..k1])
    }
}

/// Validate manual annotations and freeze them into a pool. Every
/// subquestion must carry an answer, and the terminal label (after
/// ordering) must match the demo's own answer.
pub fn label_generic_pool(
    annotations: &[PoolAnnotation],
    ordering: OrderingMode,
) -> Result<GenericDemoPool> {
    let mut demos = Vec::with_capacity(annotations.len());
    let mut seen = std::collections::BTreeSet::new();
    for ann in annotations {
        if !seen.insert(ann.id.clone()) {
            return Err(Error::validation(format!(
                "duplicate generic demo id '{}'",
                ann.id
            )));
        }
        if ann.subquestions.is_empty() {
            return Err(Error::validation(format!(
                "generic demo '{}' has no subquestion annotations",
                ann.id
            )));
        }
        for pair in &ann.subquestions {
            if pair.answer.trim().is_empty() {
                return Err(Error::validation(format!(
                    "generic demo '{}' is missing the answer for '{}'",
                    ann.id, pair.question
                )));
            }
        }
        let chain = build_chain_with_labels(&ann.question, &ann.subquestions, ordering)?;
        let terminal = chain.terminal();
        let terminal_label = terminal.label.as_deref().unwrap_or_default();
        if normalize_answer(terminal_label) != normalize_answer(&ann.answer) {
            return Err(Error::validation(format!(
                "generic demo '{}': terminal label '{}' does not match answer '{}'",
                ann.id, terminal_label, ann.answer
            )));
        }
        demos.push(GenericDemo {
            id: ann.id.clone(),
            image_ref: ann.image_ref.clone(),
            caption: ann.caption.clone(),
            question: ann.question.clone(),
            answer: ann.answer.clone(),
            chain,
        });
    }
    Ok(GenericDemoPool { demos })
}

/// One demonstration slot of an assembled shot set.
#[derive(Debug, Clone, Copy)]
pub enum ShotSource<'a> {
    Generic(&'a GenericDemo),
    Specific(&'a SelectedDemo),
}

/// Generic demos first (fixed pool order), then the selected specific
/// demos; exactly k slots.
pub fn assemble_shot_set<'a>(
    pool: &'a GenericDemoPool,
    specific: &'a [SelectedDemo],
    config: &SamplingConfig,
) -> Result<Vec<ShotSource<'a>>> {
    config.validate()?;
    if specific.len() != config.k2 {
        return Err(Error::validation(format!(
            "expected {} query-specific demos, got {}",
            config.k2,
            specific.len()
        )));
    }
    let mut shots: Vec<ShotSource<'a>> =
        pool.take(config.k1)?.iter().map(ShotSource::Generic).collect();
    shots.extend(specific.iter().map(ShotSource::Specific));
    debug_assert_eq!(shots.len(), config.k);
    Ok(shots)
}

/// Build a complete pairwise scene from (id, category, attributes, x, y)
/// tuples: smaller x is "left of", smaller y is "in front of".
pub fn fixture_scene(objects: &[(&str, &str, [&str; 3], i32, i32)]) -> SceneGraph {
    let mut scene = SceneGraph {
        objects: Vec::new(),
        relations: Vec::new(),
    };
    for (id, category, attrs, _, _) in objects {
        scene.objects.push(SceneObject {
            object_id: id.to_string(),
            category: category.to_string(),
            attributes: attrs.iter().map(|a| a.to_string()).collect(),
        });
    }
    for (id_a, _, _, xa, ya) in objects {
        for (id_b, _, _, xb, yb) in objects {
            if id_a == id_b {
                continue;
            }
            let mut push = |predicate: &str| {
                scene.relations.push(SceneRelation {
                    subject_id: id_a.to_string(),
                    predicate: predicate.to_string(),
                    object_id: id_b.to_string(),
                });
            };
            if xa < xb {
                push("left of");
            }
            if xa > xb {
                push("right of");
            }
            if ya < yb {
                push("in front of");
            }
            if ya > yb {
                push("behind");
            }
        }
    }
    scene
}

pub const POOL_SCENE_A: &str = "pool/scene-a.png";
pub const POOL_SCENE_B: &str = "pool/scene-b.png";

/// Scene graphs backing the bundled pool, for oracle-backed runs.
pub fn bundled_scenes() -> BTreeMap<String, SceneGraph> {
    let mut scenes = BTreeMap::new();
    scenes.insert(
        POOL_SCENE_A.to_string(),
        fixture_scene(&[
            ("a1", "cube", ["large", "red", "rubber"], 0, 0),
            ("a2", "sphere", ["small", "blue", "metal"], 10, 5),
            ("a3", "cylinder", ["large", "green", "glass"], 20, 2),
        ]),
    );
    scenes.insert(
        POOL_SCENE_B.to_string(),
        fixture_scene(&[
            ("b1", "cone", ["small", "purple", "metal"], 0, 9),
            ("b2", "cube", ["large", "yellow", "rubber"], 7, 3),
            ("b3", "sphere", ["small", "gray", "glass"], 14, 6),
        ]),
    );
    scenes
}

fn pair(question: &str, answer: &str) -> QaPair {
    QaPair {
        question: question.to_string(),
        answer: answer.to_string(),
    }
}

pub fn bundled_annotations() -> Vec<PoolAnnotation> {
    vec![
        PoolAnnotation {
            id: "pool-0001".to_string(),
            image_ref: POOL_SCENE_A.to_string(),
            caption: "a scene with a large red rubber cube, a small blue metal sphere, \
a large green glass cylinder"
                .to_string(),
            question: "Is there a red cube to the right of the blue sphere?".to_string(),
            answer: "no".to_string(),
            subquestions: vec![
                pair("Is there a red cube in the image?", "yes"),
                pair("Is there a blue sphere in the image?", "yes"),
                pair("Is there a red cube to the right of the blue sphere?", "no"),
            ],
        },
        PoolAnnotation {
            id: "pool-0002".to_string(),
            image_ref: POOL_SCENE_B.to_string(),
            caption: "a scene with a small purple metal cone, a large yellow rubber cube, \
a small gray glass sphere"
                .to_string(),
            question: "Is the yellow cube behind the gray sphere?".to_string(),
            answer: "no".to_string(),
            subquestions: vec![
                pair("Is there a yellow cube in the image?", "yes"),
                pair("Is there a gray sphere in the image?", "yes"),
                pair("Is the yellow cube behind the gray sphere?", "no"),
            ],
        },
        PoolAnnotation {
            id: "pool-0003".to_string(),
            image_ref: POOL_SCENE_A.to_string(),
            caption: "a scene with a large red rubber cube, a small blue metal sphere, \
a large green glass cylinder"
                .to_string(),
            question: "What color is the cylinder to the right of the blue sphere?".to_string(),
            answer: "green".to_string(),
            subquestions: vec![
                pair("Is there a blue sphere in the image?", "yes"),
                pair(
                    "Is there a cylinder to the right of the blue sphere?",
                    "yes",
                ),
                pair(
                    "What color is the cylinder to the right of the blue sphere?",
                    "green",
                ),
            ],
        },
        PoolAnnotation {
            id: "pool-0004".to_string(),
            image_ref: POOL_SCENE_B.to_string(),
            caption: "a scene with a small purple metal cone, a large yellow rubber cube, \
a small gray glass sphere"
                .to_string(),
            question: "What is the object to the left of the yellow cube?".to_string(),
            answer: "cone".to_string(),
            subquestions: vec![
                pair("Is there a yellow cube in the image?", "yes"),
                pair("Is there an object to the left of the yellow cube?", "yes"),
                pair("What is the object to the left of the yellow cube?", "cone"),
            ],
        },
    ]
}

/// The default pool: four demos, one per question family, over two fixture
/// scenes. Built through the same validation path as user-supplied pools.
pub fn bundled_pool() -> GenericDemoPool {
    label_generic_pool(&bundled_annotations(), OrderingMode::Increasing)
        .expect("bundled pool annotations are valid")
}
