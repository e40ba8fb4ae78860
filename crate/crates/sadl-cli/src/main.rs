//! Experiment harness for the sadl crate: generate synthetic data, build
//! embeddings, pre-label demonstration chains, run strategies and
//! ablations over a test split, and inspect reports and prompts.
//!
//! Every data-touching subcommand reads one TOML config file; any key can
//! be overridden on the command line with `--set section.key=value`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use sadl::dataset::{
    load_gold, load_library, load_scene_graphs, save_gold, save_library, save_scene_graphs,
    AnswerVocabulary, Library, QaPair, SceneGraph,
};
use sadl::decompose::OrderingMode;
use sadl::embed::TrigramEmbedder;
use sadl::eval::{
    alignment_vocabulary, render_report, run_ablation_suite, run_experiment_with_cache,
    summary_table, write_report, EvalEnv, EvalReport, ReportFormat, RunConfig,
};
use sadl::gateway::{HttpBackend, ModelBackend, OracleBackend, OracleBackendConfig};
use sadl::generator::generate_synthetic;
use sadl::index::{default_question_pool_size, SamplingConfig};
use sadl::pipeline::{Ablation, DecomposerMode, Pipeline};
use sadl::pool::{bundled_pool, bundled_scenes, GenericDemoPool};
use sadl::prompt::Strategy;
use sadl::pseudolabel::{LabelCache, DEFAULT_R_MAX};
use sadl::{Error, Result};

#[derive(Parser)]
#[command(name = "sadl", version, about = "Proximal demonstrations, decomposition and pseudo-labeling for compositional VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; paths inside it resolve relative to its directory
    #[arg(long)]
    config: PathBuf,

    /// Override one config key, e.g. --set run.seed=7 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic library with scenes and gold decompositions
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        scenes: usize,
        #[arg(long, default_value_t = 1000)]
        questions: usize,
        /// Directory for library.jsonl, scenes.json and gold.json
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Embedding maintenance
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Pre-label train-split chains into the label cache
    PseudoLabel {
        #[command(flatten)]
        config: ConfigArgs,
        /// Label at most this many train records
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run one strategy over the test split and write a report
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the sadl strategy plus every ablation on the same queries
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Re-render a stored report
    Report {
        /// Report JSON file written by `run` or `ablate`
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Write here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Prompt inspection
    Prompt {
        #[command(subcommand)]
        command: PromptCommand,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Fill missing embeddings and rewrite the library file in place
    Build {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Subcommand)]
enum PromptCommand {
    /// Print the rendered prompt for one record to stdout
    Dump {
        #[command(flatten)]
        config: ConfigArgs,
        /// Record id to render
        #[arg(long)]
        id: String,
        /// 1-based step index; defaults to the final step
        #[arg(long)]
        step: Option<usize>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: DataSection,
    backend: BackendSection,
    run: RunSection,
    output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    library: PathBuf,
    scenes: PathBuf,
    gold: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            library: "data/library.jsonl".into(),
            scenes: "data/scenes.json".into(),
            gold: "data/gold.json".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BackendKind {
    Oracle,
    Http,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BackendSection {
    kind: BackendKind,
    atomic_error_rate: f64,
    context_repair: bool,
    seed: u64,
    /// http only
    endpoint: Option<String>,
    /// http only
    model: Option<String>,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Oracle,
            atomic_error_rate: 0.0,
            context_repair: true,
            seed: 0,
            endpoint: None,
            model: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    strategy: Strategy,
    ablation: Ablation,
    seed: u64,
    k: usize,
    k1: usize,
    k2: usize,
    /// Stage-one shortlist size; derived from k2 when omitted.
    question_pool_size: Option<usize>,
    ordering: OrderingMode,
    decomposer: DecomposerMode,
    m_max: usize,
    r_max: u32,
    max_prompt_chars: Option<usize>,
    max_queries: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        let base = RunConfig::default();
        RunSection {
            strategy: base.strategy,
            ablation: base.ablation,
            seed: base.seed,
            k: base.sampling.k,
            k1: base.sampling.k1,
            k2: base.sampling.k2,
            question_pool_size: None,
            ordering: base.ordering,
            decomposer: base.decomposer,
            m_max: base.m_max,
            r_max: DEFAULT_R_MAX,
            max_prompt_chars: base.max_prompt_chars,
            max_queries: base.max_queries,
        }
    }
}

impl RunSection {
    fn to_run_config(&self) -> RunConfig {
        RunConfig {
            strategy: self.strategy,
            ablation: self.ablation,
            sampling: SamplingConfig {
                k: self.k,
                k1: self.k1,
                k2: self.k2,
                question_pool_size: self
                    .question_pool_size
                    .unwrap_or_else(|| default_question_pool_size(self.k2)),
            },
            decomposer: self.decomposer,
            ordering: self.ordering,
            seed: self.seed,
            m_max: self.m_max,
            r_max: self.r_max,
            max_prompt_chars: self.max_prompt_chars,
            max_queries: self.max_queries,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OutputSection {
    dir: PathBuf,
    format: ReportFormat,
    traces: bool,
    label_cache: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            format: ReportFormat::Json,
            traces: false,
            label_cache: None,
        }
    }
}

/// Parse the config file and apply `--set` overrides, returning the
/// config plus the directory its relative paths resolve against.
fn load_config(args: &ConfigArgs) -> Result<(FileConfig, PathBuf)> {
    let path = &args.config;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config '{}': {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::config(format!("config '{}': {e}", path.display())))?;
    for spec in &args.set {
        apply_override(&mut table, spec)?;
    }
    let config: FileConfig = table
        .try_into()
        .map_err(|e| Error::config(format!("config '{}': {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, base))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--set expects key.path=value, got '{spec}'")))?;
    let key = key.trim();
    let mut segments: Vec<&str> = key.split('.').collect();
    if key.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("--set has an empty key segment in '{spec}'")));
    }
    let last = segments.pop().expect("nonempty key");
    let mut current = table;
    for segment in segments {
        current = current
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::config(format!("--set '{key}': '{segment}' is not a table"))
            })?;
    }
    current.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// `true`, `3`, `0.15` and friends keep their TOML type; anything that
/// does not parse becomes a string, so quoting is optional.
fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Print to stdout, treating a broken pipe (e.g. `| head`) as success.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    match stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io(e)),
        _ => Ok(()),
    }
}

/// Loaded dataset plus the backend and support structures a run needs.
struct Session {
    library: Library,
    gold: BTreeMap<String, Vec<QaPair>>,
    pool: GenericDemoPool,
    vocabulary: AnswerVocabulary,
    backend: Box<dyn ModelBackend>,
    provider: TrigramEmbedder,
}

impl Session {
    fn open(config: &FileConfig, base: &Path) -> Result<Session> {
        let provider = TrigramEmbedder::default();
        let mut library = load_library(resolve(base, &config.data.library))?;
        library.materialize_embeddings(&provider)?;
        let scenes = load_scene_graphs(resolve(base, &config.data.scenes))?;
        let gold = load_gold(resolve(base, &config.data.gold))?;
        let vocabulary = alignment_vocabulary(&library, &scenes, &provider)?;
        let backend = build_backend(config, &library, &scenes, &gold)?;
        Ok(Session {
            library,
            gold,
            pool: bundled_pool(),
            vocabulary,
            backend,
            provider,
        })
    }

    fn eval_env(&self) -> EvalEnv<'_> {
        EvalEnv {
            library: &self.library,
            pool: &self.pool,
            gold: &self.gold,
            backend: self.backend.as_ref(),
            vocabulary: &self.vocabulary,
            provider: &self.provider,
        }
    }

    fn pipeline(&self, run: &RunConfig) -> Result<Pipeline<'_>> {
        Pipeline::new(
            &self.library,
            &self.pool,
            &self.gold,
            self.backend.as_ref(),
            &self.vocabulary,
            &self.provider,
            run.pipeline_config(),
            run.seed,
        )
    }
}

fn build_backend(
    config: &FileConfig,
    library: &Library,
    scenes: &BTreeMap<String, SceneGraph>,
    gold: &BTreeMap<String, Vec<QaPair>>,
) -> Result<Box<dyn ModelBackend>> {
    match config.backend.kind {
        BackendKind::Oracle => {
            let mut oracle = OracleBackend::new(OracleBackendConfig {
                scene_graphs: scenes.clone(),
                atomic_error_rate: config.backend.atomic_error_rate,
                context_repair: config.backend.context_repair,
                seed: config.backend.seed,
            })?;
            if config.run.decomposer == DecomposerMode::Llm {
                // The oracle cannot invent decompositions; script the
                // curated ones so `complete` has something to replay.
                let mut scripts = BTreeMap::new();
                for record in library.records() {
                    if let Some(chain) = gold.get(&record.id) {
                        scripts.insert(
                            record.question.clone(),
                            chain.iter().map(|pair| pair.question.clone()).collect(),
                        );
                    }
                }
                oracle = oracle.with_decompositions(scripts);
            }
            Ok(Box::new(oracle))
        }
        BackendKind::Http => {
            let endpoint = config.backend.endpoint.clone().ok_or_else(|| {
                Error::config("backend.endpoint is required when kind = \"http\"")
            })?;
            let model = config
                .backend
                .model
                .clone()
                .ok_or_else(|| Error::config("backend.model is required when kind = \"http\""))?;
            Ok(Box::new(HttpBackend::new(endpoint, model)?))
        }
    }
}

fn label_cache_dir(config: &FileConfig, base: &Path) -> PathBuf {
    match &config.output.label_cache {
        Some(dir) => resolve(base, dir),
        None => resolve(base, &config.output.dir).join("labels"),
    }
}

fn run_basename(run: &RunConfig) -> String {
    if run.ablation == Ablation::None {
        run.strategy.to_string()
    } else {
        format!("{}-{}", run.strategy, run.ablation)
    }
}

fn cmd_generate(seed: u64, scenes: usize, questions: usize, out_dir: &Path) -> Result<()> {
    let dataset = generate_synthetic(seed, scenes, questions)?;
    let library = Library::from_records(dataset.records)?;
    // Ship the curated pool's scenes alongside the generated ones so one
    // file covers every image a prompt can reference.
    let mut scene_map = dataset.scenes;
    for (image_ref, graph) in bundled_scenes() {
        scene_map.entry(image_ref).or_insert(graph);
    }
    fs::create_dir_all(out_dir)?;
    save_library(out_dir.join("library.jsonl"), &library)?;
    save_scene_graphs(out_dir.join("scenes.json"), &scene_map)?;
    save_gold(out_dir.join("gold.json"), &dataset.gold)?;
    let train = library.train_records().count();
    let test = library.test_records().count();
    println!(
        "wrote {} records ({train} train / {test} test), {} scenes, {} gold chains under {}",
        library.len(),
        scene_map.len(),
        dataset.gold.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_index_build(args: &ConfigArgs) -> Result<()> {
    let (config, base) = load_config(args)?;
    let path = resolve(&base, &config.data.library);
    let mut library = load_library(&path)?;
    let filled = library.materialize_embeddings(&TrigramEmbedder::default())?;
    save_library(&path, &library)?;
    println!(
        "materialized {filled} embedding vectors across {} records in {}",
        library.len(),
        path.display()
    );
    Ok(())
}

fn cmd_pseudo_label(args: &ConfigArgs, limit: Option<usize>) -> Result<()> {
    let (config, base) = load_config(args)?;
    let session = Session::open(&config, &base)?;
    let run = config.run.to_run_config();
    let cache_dir = label_cache_dir(&config, &base);
    let mut pipeline = session
        .pipeline(&run)?
        .with_label_cache(LabelCache::new(&cache_dir)?);
    let ids: Vec<String> = session
        .library
        .train_records()
        .map(|record| record.id.clone())
        .collect();
    let take = limit.unwrap_or(ids.len()).min(ids.len());
    for id in &ids[..take] {
        pipeline.labeled_chain(id)?;
    }
    let summary = pipeline.adjustment_summary();
    println!(
        "labeled {} chains into {} ({} restarts, {} forced, {} model calls)",
        summary.chains,
        cache_dir.display(),
        summary.restarts_total,
        summary.forced_chains,
        summary.model_calls
    );
    Ok(())
}

fn cmd_run(args: &ConfigArgs) -> Result<()> {
    let (config, base) = load_config(args)?;
    let session = Session::open(&config, &base)?;
    let run = config.run.to_run_config();
    let out_dir = resolve(&base, &config.output.dir);
    let trace_dir = config.output.traces.then(|| out_dir.join("traces"));
    let cache = match &config.output.label_cache {
        Some(dir) => Some(LabelCache::new(resolve(&base, dir))?),
        None => None,
    };
    let report = run_experiment_with_cache(&session.eval_env(), &run, trace_dir.as_deref(), cache)?;
    let path = write_report(&report, &out_dir, &run_basename(&run), config.output.format)?;
    emit(&summary_table(&[&report]))?;
    emit(&format!("report written to {}\n", path.display()))?;
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs) -> Result<()> {
    let (config, base) = load_config(args)?;
    let session = Session::open(&config, &base)?;
    let run = config.run.to_run_config();
    let out_dir = resolve(&base, &config.output.dir);
    let trace_dir = config.output.traces.then(|| out_dir.join("traces"));
    let reports = run_ablation_suite(&session.eval_env(), &run, trace_dir.as_deref())?;
    for (ablation, report) in &reports {
        write_report(report, &out_dir, &format!("ablation-{ablation}"), config.output.format)?;
    }
    let refs: Vec<&EvalReport> = reports.iter().map(|(_, report)| report).collect();
    emit(&summary_table(&refs))?;
    emit(&format!("{} reports written under {}\n", reports.len(), out_dir.display()))?;
    Ok(())
}

fn cmd_report(input: &Path, format: ReportFormat, output: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input)
        .map_err(|e| Error::config(format!("cannot read report '{}': {e}", input.display())))?;
    let report: EvalReport = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("cannot parse report '{}': {e}", input.display())))?;
    report.validate()?;
    let rendered = render_report(&report, format)?;
    match output {
        Some(path) => {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, &rendered)?;
            println!("wrote {}", path.display());
        }
        None => emit(&rendered)?,
    }
    Ok(())
}

fn cmd_prompt_dump(args: &ConfigArgs, id: &str, step: Option<usize>) -> Result<()> {
    let (config, base) = load_config(args)?;
    let session = Session::open(&config, &base)?;
    let run = config.run.to_run_config();
    let record = session
        .library
        .get(id)
        .ok_or_else(|| Error::validation(format!("unknown record id '{id}'")))?;
    let mut pipeline = session.pipeline(&run)?;
    let result = pipeline.answer_query(record, run.strategy, run.ablation)?;
    let steps = &result.trace.steps;
    let index = match step {
        None => steps.len() - 1,
        Some(0) => return Err(Error::config("--step is 1-based")),
        Some(n) if n > steps.len() => {
            return Err(Error::config(format!(
                "query '{id}' used {} steps, --step {n} is out of range",
                steps.len()
            )))
        }
        Some(n) => n - 1,
    };
    emit(&steps[index].prompt)?;
    emit("\n")?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { seed, scenes, questions, out_dir } => {
            cmd_generate(seed, scenes, questions, &out_dir)
        }
        Command::Index { command: IndexCommand::Build { config } } => cmd_index_build(&config),
        Command::PseudoLabel { config, limit } => cmd_pseudo_label(&config, limit),
        Command::Run { config } => cmd_run(&config),
        Command::Ablate { config } => cmd_ablate(&config),
        Command::Report { input, format, output } => {
            cmd_report(&input, format, output.as_deref())
        }
        Command::Prompt { command: PromptCommand::Dump { config, id, step } } => {
            cmd_prompt_dump(&config, &id, step)
        }
    }
}

/// 0 success, 2 config error, 3 backend error, 4 validation error.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Transport { .. } | Error::ScriptExhausted(_) | Error::UnknownImage(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
