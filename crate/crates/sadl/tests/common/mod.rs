//! Shared fixture behind the prompt golden files: a two-scene library,
//! the bundled generic pool and a noiseless oracle. Each strategy's final
//! query prompt is rendered through the full pipeline so the files freeze
//! shot assembly, deliberation layout and the query block in one place.

use std::collections::BTreeMap;

use sadl::dataset::{DemonstrationRecord, Library, QaPair, Split};
use sadl::decompose::{build_decomposition_prompt, DecompositionExemplar};
use sadl::embed::TrigramEmbedder;
use sadl::eval::alignment_vocabulary;
use sadl::gateway::oracle::{OracleBackend, OracleBackendConfig};
use sadl::pipeline::{Ablation, Pipeline, PipelineConfig};
use sadl::pool::{bundled_pool, bundled_scenes, fixture_scene, POOL_SCENE_A, POOL_SCENE_B};
use sadl::prompt::Strategy;
use sadl::scene::answer_question;

pub const GOLDEN_NAMES: [&str; 5] = ["vanilla", "cot", "l2m", "sadl", "decomposition"];

fn record(
    id: &str,
    image_ref: &str,
    caption: &str,
    question: &str,
    answer: &str,
    split: Split,
) -> DemonstrationRecord {
    DemonstrationRecord {
        id: id.to_string(),
        image_ref: image_ref.to_string(),
        caption: caption.to_string(),
        question: question.to_string(),
        answer: answer.to_string(),
        split,
        question_embedding: None,
        image_embedding: None,
    }
}

/// Render the final query prompt of every strategy, plus the decomposition
/// prompt, over a fixed fixture. Deterministic byte for byte.
pub fn golden_prompts() -> Vec<(&'static str, String)> {
    let mut scenes = bundled_scenes();
    scenes.insert(
        "img/golden-query.png".to_string(),
        fixture_scene(&[
            ("o1", "cube", ["red", "large", "rubber"], 0, 0),
            ("o2", "sphere", ["blue", "small", "metal"], 9, 4),
        ]),
    );
    let provider = TrigramEmbedder::default();
    let mut library = Library::from_records(vec![
        record(
            "train-0001",
            POOL_SCENE_A,
            "a red cube beside a blue sphere and a green cylinder",
            "Is there a red cube to the left of the blue sphere?",
            "yes",
            Split::Train,
        ),
        record(
            "train-0002",
            POOL_SCENE_B,
            "a purple cone, a yellow cube and a gray sphere",
            "Is there a yellow cube to the right of the purple cone?",
            "yes",
            Split::Train,
        ),
        record(
            "query-0001",
            "img/golden-query.png",
            "a red cube to the left of a blue sphere",
            "Is there a red cube to the left of the blue sphere?",
            "yes",
            Split::Test,
        ),
    ])
    .expect("fixture records are valid");
    library
        .materialize_embeddings(&provider)
        .expect("trigram embeddings never fail");

    let mut gold = BTreeMap::new();
    for (id, subs) in [
        (
            "train-0001",
            vec![
                "Is there a red cube in the image?",
                "Is there a blue sphere in the image?",
                "Is there a red cube to the left of the blue sphere?",
            ],
        ),
        (
            "train-0002",
            vec![
                "Is there a yellow cube in the image?",
                "Is there a purple cone in the image?",
                "Is there a yellow cube to the right of the purple cone?",
            ],
        ),
        (
            "query-0001",
            vec![
                "Is there a red cube in the image?",
                "Is there a blue sphere in the image?",
                "Is there a red cube to the left of the blue sphere?",
            ],
        ),
    ] {
        let scene = &scenes[&library.get(id).unwrap().image_ref];
        let pairs = subs
            .iter()
            .map(|q| QaPair {
                question: q.to_string(),
                answer: answer_question(scene, q),
            })
            .collect();
        gold.insert(id.to_string(), pairs);
    }

    let vocabulary = alignment_vocabulary(&library, &scenes, &provider)
        .expect("fixture vocabulary builds");
    let backend = OracleBackend::new(OracleBackendConfig {
        scene_graphs: scenes,
        atomic_error_rate: 0.0,
        context_repair: true,
        seed: 1,
    })
    .expect("zero error rate is valid");
    let pool = bundled_pool();
    let mut pipeline = Pipeline::new(
        &library,
        &pool,
        &gold,
        &backend,
        &vocabulary,
        &provider,
        PipelineConfig::default(),
        1,
    )
    .expect("default pipeline config is valid");

    let query = library.get("query-0001").unwrap();
    let mut prompts = Vec::with_capacity(GOLDEN_NAMES.len());
    for strategy in Strategy::ALL {
        let result = pipeline
            .answer_query(query, strategy, Ablation::None)
            .expect("noiseless fixture queries never fail");
        let prompt = result
            .trace
            .steps
            .last()
            .expect("every query runs at least one step")
            .prompt
            .clone();
        prompts.push((strategy.as_str(), prompt));
    }

    let exemplars: Vec<DecompositionExemplar> = pool
        .demos()
        .iter()
        .map(|demo| DecompositionExemplar {
            question: demo.question.clone(),
            subquestions: demo.chain.subquestions().map(str::to_string).collect(),
        })
        .collect();
    let decomposition = build_decomposition_prompt(&query.question, &exemplars)
        .expect("pool exemplars are non-empty");
    prompts.push(("decomposition", decomposition));

    let names: Vec<&str> = prompts.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, GOLDEN_NAMES, "golden fixture covers every file");
    prompts
}
