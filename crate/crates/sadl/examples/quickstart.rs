//! Minimal end-to-end run: generate a seeded corpus, point the noisy
//! oracle at it, and measure the default pipeline on the test split.

use sadl::dataset::Library;
use sadl::embed::TrigramEmbedder;
use sadl::eval::{alignment_vocabulary, run_experiment, summary_table, EvalEnv, RunConfig};
use sadl::gateway::{OracleBackend, OracleBackendConfig};
use sadl::generator::generate_synthetic;
use sadl::pool::{bundled_pool, bundled_scenes};

fn main() -> Result<(), sadl::Error> {
    let data = generate_synthetic(17, 40, 1000)?;
    let mut library = Library::from_records(data.records)?;
    let provider = TrigramEmbedder::default();
    library.materialize_embeddings(&provider)?;
    let mut scenes = data.scenes;
    scenes.extend(bundled_scenes());
    let backend = OracleBackend::new(OracleBackendConfig {
        scene_graphs: scenes.clone(),
        atomic_error_rate: 0.15,
        context_repair: true,
        seed: 17,
    })?;
    let pool = bundled_pool();
    let vocabulary = alignment_vocabulary(&library, &scenes, &provider)?;
    let env = EvalEnv {
        library: &library,
        pool: &pool,
        gold: &data.gold,
        backend: &backend,
        vocabulary: &vocabulary,
        provider: &provider,
    };
    let report = run_experiment(&env, &RunConfig::default(), None)?;
    print!("{}", summary_table(&[&report]));
    println!("accuracy {:.3}", report.accuracy());
    Ok(())
}
