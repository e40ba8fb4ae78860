//! Synthetic compositional VQA corpus: seeded scenes with derived spatial
//! relations, questions from four families plus a deeper nested family,
//! and gold decompositions whose terminal subquestion is the original
//! question. Answers are computed constructively while the scene is being
//! assembled, never by running the question evaluator, so the evaluator
//! can be checked against them.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    DemonstrationRecord, QaPair, SceneGraph, SceneObject, SceneRelation, Split,
};
use crate::error::{Error, Result};
use crate::scene::{Predicate, COLORS, MATERIALS, SIZES};

pub const CATEGORIES: [&str; 4] = ["cube", "sphere", "cylinder", "cone"];

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<DemonstrationRecord>,
    pub scenes: BTreeMap<String, SceneGraph>,
    pub gold: BTreeMap<String, Vec<QaPair>>,
}

#[derive(Debug, Clone)]
struct SceneSpec {
    image_ref: String,
    caption: String,
    graph: SceneGraph,
    objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone)]
struct ObjectSpec {
    category: String,
    color: String,
    size: String,
    material: String,
    x: i64,
    y: i64,
}

impl ObjectSpec {
    /// Color + category; unique within a scene by construction.
    fn desc(&self) -> String {
        format!("{} {}", self.color, self.category)
    }

    fn relation_to(&self, other: &ObjectSpec, predicate: Predicate) -> bool {
        match predicate {
            Predicate::LeftOf => self.x < other.x,
            Predicate::RightOf => self.x > other.x,
            Predicate::Behind => self.y < other.y,
            Predicate::InFrontOf => self.y > other.y,
            Predicate::Holding => false,
        }
    }
}

fn sample_distinct(rng: &mut ChaCha8Rng, upper: i64, n: usize) -> Vec<i64> {
    let mut pool: Vec<i64> = (0..upper).collect();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

fn build_scene(rng: &mut ChaCha8Rng, index: usize) -> SceneSpec {
    let n_objects = rng.gen_range(4..=6);
    let mut combos: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|c| (0..CATEGORIES.len()).map(move |k| (c, k)))
        .collect();
    combos.shuffle(rng);
    let xs = sample_distinct(rng, 50, n_objects);
    let ys = sample_distinct(rng, 50, n_objects);
    let objects: Vec<ObjectSpec> = combos
        .iter()
        .take(n_objects)
        .enumerate()
        .map(|(i, (c, k))| ObjectSpec {
            category: CATEGORIES[*k].to_string(),
            color: COLORS[*c].to_string(),
            size: SIZES[rng.gen_range(0..SIZES.len())].to_string(),
            material: MATERIALS[rng.gen_range(0..MATERIALS.len())].to_string(),
            x: xs[i],
            y: ys[i],
        })
        .collect();

    let scene_objects = objects
        .iter()
        .enumerate()
        .map(|(i, o)| SceneObject {
            object_id: format!("o{i}"),
            category: o.category.clone(),
            attributes: [o.color.clone(), o.size.clone(), o.material.clone()]
                .into_iter()
                .collect(),
        })
        .collect();
    let mut relations = Vec::new();
    for i in 0..objects.len() {
        for j in 0..objects.len() {
            if i == j {
                continue;
            }
            for predicate in [
                Predicate::LeftOf,
                Predicate::RightOf,
                Predicate::Behind,
                Predicate::InFrontOf,
            ] {
                if objects[i].relation_to(&objects[j], predicate) {
                    relations.push(SceneRelation {
                        subject_id: format!("o{i}"),
                        predicate: predicate.as_str().to_string(),
                        object_id: format!("o{j}"),
                    });
                }
            }
        }
    }
    let caption = format!(
        "a scene with {}",
        objects
            .iter()
            .map(|o| format!("a {} {} {} {}", o.size, o.color, o.material, o.category))
            .collect::<Vec<_>>()
            .join(", ")
    );
    SceneSpec {
        image_ref: format!("scene-{index:04}"),
        caption,
        graph: SceneGraph {
            objects: scene_objects,
            relations,
        },
        objects,
    }
}

fn spatial_predicate(rng: &mut ChaCha8Rng) -> Predicate {
    match rng.gen_range(0..4) {
        0 => Predicate::LeftOf,
        1 => Predicate::RightOf,
        2 => Predicate::Behind,
        _ => Predicate::InFrontOf,
    }
}

/// A predicate that actually holds from `a` to `b`.
fn true_predicate(rng: &mut ChaCha8Rng, a: &ObjectSpec, b: &ObjectSpec) -> Predicate {
    if rng.gen_bool(0.5) {
        if a.x < b.x {
            Predicate::LeftOf
        } else {
            Predicate::RightOf
        }
    } else if a.y < b.y {
        Predicate::Behind
    } else {
        Predicate::InFrontOf
    }
}

fn yes_no(v: bool) -> String {
    if v { "yes" } else { "no" }.to_string()
}

fn exists_in_image(desc: &str) -> QaPair {
    QaPair {
        question: format!("Is there a {desc} in the image?"),
        answer: "yes".to_string(),
    }
}

struct GeneratedQuestion {
    question: String,
    answer: String,
    chain: Vec<QaPair>,
}

fn two_distinct(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize) {
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

fn gen_exists_rel(rng: &mut ChaCha8Rng, scene: &SceneSpec) -> GeneratedQuestion {
    let (ai, bi) = two_distinct(rng, scene.objects.len());
    let (a, b) = (&scene.objects[ai], &scene.objects[bi]);
    let predicate = spatial_predicate(rng);
    let question = format!(
        "Is there a {} {} the {}?",
        a.desc(),
        predicate.phrase(),
        b.desc()
    );
    let answer = yes_no(a.relation_to(b, predicate));
    let chain = vec![
        exists_in_image(&a.desc()),
        exists_in_image(&b.desc()),
        QaPair {
            question: question.clone(),
            answer: answer.clone(),
        },
    ];
    GeneratedQuestion {
        question,
        answer,
        chain,
    }
}

fn gen_verify(rng: &mut ChaCha8Rng, scene: &SceneSpec) -> GeneratedQuestion {
    let (ai, bi) = two_distinct(rng, scene.objects.len());
    let (a, b) = (&scene.objects[ai], &scene.objects[bi]);
    let predicate = spatial_predicate(rng);
    let question = format!(
        "Is the {} {} the {}?",
        a.desc(),
        predicate.phrase(),
        b.desc()
    );
    let answer = yes_no(a.relation_to(b, predicate));
    let chain = vec![
        exists_in_image(&a.desc()),
        exists_in_image(&b.desc()),
        QaPair {
            question: question.clone(),
            answer: answer.clone(),
        },
    ];
    GeneratedQuestion {
        question,
        answer,
        chain,
    }
}

fn gen_attribute(rng: &mut ChaCha8Rng, scene: &SceneSpec) -> Option<GeneratedQuestion> {
    let (ai, bi) = two_distinct(rng, scene.objects.len());
    let (a, b) = (&scene.objects[ai], &scene.objects[bi]);
    let predicate = true_predicate(rng, a, b);
    // The referent "the <category> <pred> the <desc b>" must be unique.
    let candidates = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, o)| *i != bi && o.category == a.category && o.relation_to(b, predicate))
        .count();
    if candidates != 1 {
        return None;
    }
    let (kind, answer) = match rng.gen_range(0..3) {
        0 => ("color", a.color.clone()),
        1 => ("size", a.size.clone()),
        _ => ("material", a.material.clone()),
    };
    let question = format!(
        "What {kind} is the {} {} the {}?",
        a.category,
        predicate.phrase(),
        b.desc()
    );
    let chain = vec![
        exists_in_image(&b.desc()),
        QaPair {
            question: format!(
                "Is there a {} {} the {}?",
                a.category,
                predicate.phrase(),
                b.desc()
            ),
            answer: "yes".to_string(),
        },
        QaPair {
            question: question.clone(),
            answer: answer.clone(),
        },
    ];
    Some(GeneratedQuestion {
        question,
        answer,
        chain,
    })
}

fn gen_category(rng: &mut ChaCha8Rng, scene: &SceneSpec) -> Option<GeneratedQuestion> {
    let bi = rng.gen_range(0..scene.objects.len());
    let b = &scene.objects[bi];
    let predicate = spatial_predicate(rng);
    let mut referents = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, o)| *i != bi && o.relation_to(b, predicate));
    let (_, referent) = referents.next()?;
    if referents.next().is_some() {
        return None;
    }
    let question = format!("What is the object {} the {}?", predicate.phrase(), b.desc());
    let answer = referent.category.clone();
    let chain = vec![
        exists_in_image(&b.desc()),
        QaPair {
            question: format!("Is there an object {} the {}?", predicate.phrase(), b.desc()),
            answer: "yes".to_string(),
        },
        QaPair {
            question: question.clone(),
            answer: answer.clone(),
        },
    ];
    Some(GeneratedQuestion {
        question,
        answer,
        chain,
    })
}

fn gen_nested(rng: &mut ChaCha8Rng, scene: &SceneSpec) -> Option<GeneratedQuestion> {
    let n = scene.objects.len();
    let (bi, ci) = two_distinct(rng, n);
    let (b, c) = (&scene.objects[bi], &scene.objects[ci]);
    let inner = true_predicate(rng, b, c);
    // "the <category b> that is <inner> the <desc c>" must pick out b alone.
    let middle_matches = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, o)| *i != ci && o.category == b.category && o.relation_to(c, inner))
        .count();
    if middle_matches != 1 {
        return None;
    }
    let mut ai = rng.gen_range(0..n);
    if ai == bi || ai == ci {
        ai = (0..n).find(|i| *i != bi && *i != ci)?;
    }
    let a = &scene.objects[ai];
    let outer = spatial_predicate(rng);
    let question = format!(
        "Is there a {} {} the {} that is {} the {}?",
        a.desc(),
        outer.phrase(),
        b.category,
        inner.phrase(),
        c.desc()
    );
    let answer = yes_no(a.relation_to(b, outer));
    let chain = vec![
        exists_in_image(&c.desc()),
        exists_in_image(&b.category),
        QaPair {
            question: format!(
                "Is the {} {} the {}?",
                b.category,
                inner.phrase(),
                c.desc()
            ),
            answer: "yes".to_string(),
        },
        exists_in_image(&a.desc()),
        QaPair {
            question: question.clone(),
            answer: answer.clone(),
        },
    ];
    Some(GeneratedQuestion {
        question,
        answer,
        chain,
    })
}

/// Generate a seeded corpus: `n_scenes` scenes and `n_questions` records
/// spread across them round-robin, with an 80/20 train/test split.
pub fn generate_synthetic(
    seed: u64,
    n_scenes: usize,
    n_questions: usize,
) -> Result<SyntheticDataset> {
    if n_scenes == 0 || n_questions == 0 {
        return Err(Error::config("scene and question counts must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<SceneSpec> = (0..n_scenes).map(|i| build_scene(&mut rng, i)).collect();

    let mut records = Vec::with_capacity(n_questions);
    let mut gold = BTreeMap::new();
    for qi in 0..n_questions {
        let scene = &scenes[qi % n_scenes];
        let generated = loop {
            let choice = rng.gen_range(0..100);
            let attempt = match choice {
                0..=21 => Some(gen_exists_rel(&mut rng, scene)),
                22..=43 => Some(gen_verify(&mut rng, scene)),
                44..=61 => gen_attribute(&mut rng, scene),
                62..=79 => gen_category(&mut rng, scene),
                _ => gen_nested(&mut rng, scene),
            };
            if let Some(g) = attempt {
                break g;
            }
        };
        let id = format!("q{qi:05}");
        let split = if qi % 5 == 4 { Split::Test } else { Split::Train };
        records.push(DemonstrationRecord {
            id: id.clone(),
            image_ref: scene.image_ref.clone(),
            caption: scene.caption.clone(),
            question: generated.question,
            answer: generated.answer,
            split,
            question_embedding: None,
            image_embedding: None,
        });
        gold.insert(id, generated.chain);
    }

    let scenes = scenes
        .into_iter()
        .map(|s| (s.image_ref, s.graph))
        .collect();
    Ok(SyntheticDataset {
        records,
        scenes,
        gold,
    })
}
