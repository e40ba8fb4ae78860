//! Experiment runner: sweeps the test split with one strategy/ablation
//! setting, scores predictions against gold answers and emits
//! deterministic reports in JSON, CSV or table form.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{AnswerVocabulary, DemonstrationRecord, Library, QaPair, SceneGraph};
use crate::decompose::OrderingMode;
use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::gateway::oracle::derived_vocabulary;
use crate::gateway::ModelBackend;
use crate::index::SamplingConfig;
use crate::normalize::normalize_answer;
use crate::pipeline::{
    Ablation, AdjustmentSummary, DecomposerMode, Pipeline, PipelineConfig,
};
use crate::pool::GenericDemoPool;
use crate::prompt::Strategy;
use crate::pseudolabel::{LabelCache, DEFAULT_R_MAX};
use crate::scene::parse_question;

/// Fraction of the train-split answer mass covered by "head" answers.
const HEAD_MASS: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub ablation: Ablation,
    pub sampling: SamplingConfig,
    pub decomposer: DecomposerMode,
    pub ordering: OrderingMode,
    pub seed: u64,
    pub m_max: usize,
    pub r_max: u32,
    pub max_prompt_chars: Option<usize>,
    pub max_queries: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        RunConfig {
            strategy: Strategy::Sadl,
            ablation: Ablation::None,
            sampling: pipeline.sampling,
            decomposer: pipeline.decomposer,
            ordering: pipeline.ordering,
            seed: 0,
            m_max: pipeline.m_max,
            r_max: DEFAULT_R_MAX,
            max_prompt_chars: None,
            max_queries: None,
        }
    }
}

impl RunConfig {
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            sampling: self.sampling,
            ordering: self.ordering,
            m_max: self.m_max,
            r_max: self.r_max,
            max_prompt_chars: self.max_prompt_chars,
            decomposer: self.decomposer,
        }
    }
}

/// Everything a run needs, borrowed so one dataset can serve many runs.
pub struct EvalEnv<'a> {
    pub library: &'a Library,
    pub pool: &'a GenericDemoPool,
    pub gold: &'a BTreeMap<String, Vec<QaPair>>,
    pub backend: &'a dyn ModelBackend,
    pub vocabulary: &'a AnswerVocabulary,
    pub provider: &'a dyn EmbeddingProvider,
}

/// The answer space used for alignment: every answer in the library plus
/// everything the scenes can express, so a correct backend reply always
/// aligns to itself.
pub fn alignment_vocabulary(
    library: &Library,
    scenes: &BTreeMap<String, SceneGraph>,
    provider: &dyn EmbeddingProvider,
) -> Result<AnswerVocabulary> {
    let mut entries: std::collections::BTreeSet<String> = library
        .vocabulary()
        .entries()
        .iter()
        .cloned()
        .collect();
    entries.extend(derived_vocabulary(scenes));
    let entries: Vec<String> = entries.into_iter().collect();
    AnswerVocabulary::from_answers(entries.iter().map(String::as_str), provider)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Slice {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
    }

    fn finalize(mut self) -> Slice {
        self.accuracy = if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuestion {
    pub id: String,
    pub family: String,
    pub gold: String,
    pub predicted: String,
    pub correct: bool,
    /// Length of the gold decomposition, a proxy for compositional depth.
    pub gold_steps: usize,
    pub model_calls: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub overall: Slice,
    /// Questions whose gold answer is yes or no.
    pub binary: Slice,
    pub open: Slice,
    pub per_family: BTreeMap<String, Slice>,
    /// Most frequent train answers covering at least 20% of the mass,
    /// in rank order.
    pub head_answers: Vec<String>,
    pub head: Slice,
    pub tail: Slice,
    pub mean_model_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub backend_id: String,
    pub per_question: Vec<PerQuestion>,
    pub aggregates: Aggregates,
    pub adjustment: AdjustmentSummary,
}

fn head_answer_set(library: &Library) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for record in library.train_records() {
        *counts.entry(normalize_answer(&record.answer)).or_default() += 1;
        total += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut head = Vec::new();
    let mut mass = 0usize;
    for (answer, count) in ranked {
        if total > 0 && (mass as f64 / total as f64) >= HEAD_MASS {
            break;
        }
        mass += count;
        head.push(answer);
    }
    head
}

fn compute_aggregates(per_question: &[PerQuestion], head_answers: &[String]) -> Aggregates {
    let mut overall = Slice::default();
    let mut binary = Slice::default();
    let mut open = Slice::default();
    let mut head = Slice::default();
    let mut tail = Slice::default();
    let mut per_family: BTreeMap<String, Slice> = BTreeMap::new();
    let mut calls = 0u64;
    for q in per_question {
        overall.add(q.correct);
        if q.gold == "yes" || q.gold == "no" {
            binary.add(q.correct);
        } else {
            open.add(q.correct);
        }
        if head_answers.iter().any(|a| a == &q.gold) {
            head.add(q.correct);
        } else {
            tail.add(q.correct);
        }
        per_family.entry(q.family.clone()).or_default().add(q.correct);
        calls += u64::from(q.model_calls);
    }
    let mean_model_calls = if per_question.is_empty() {
        0.0
    } else {
        calls as f64 / per_question.len() as f64
    };
    Aggregates {
        overall: overall.finalize(),
        binary: binary.finalize(),
        open: open.finalize(),
        per_family: per_family
            .into_iter()
            .map(|(k, v)| (k, v.finalize()))
            .collect(),
        head_answers: head_answers.to_vec(),
        head: head.finalize(),
        tail: tail.finalize(),
        mean_model_calls,
    }
}

impl EvalReport {
    /// Self-consistency: the stored aggregates must be exactly what the
    /// per-question rows imply. Guards against hand-edited reports.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for q in &self.per_question {
            if !seen.insert(&q.id) {
                return Err(Error::validation(format!(
                    "report lists query '{}' twice",
                    q.id
                )));
            }
            if q.correct != (q.predicted == q.gold) {
                return Err(Error::validation(format!(
                    "query '{}' has an inconsistent correctness flag",
                    q.id
                )));
            }
        }
        let recomputed = compute_aggregates(&self.per_question, &self.aggregates.head_answers);
        if recomputed != self.aggregates {
            return Err(Error::validation(
                "report aggregates do not match the per-question rows",
            ));
        }
        Ok(())
    }

    pub fn accuracy(&self) -> f64 {
        self.aggregates.overall.accuracy
    }
}

/// Accuracy over queries whose gold decomposition has at least
/// `min_steps` subquestions.
pub fn complexity_slice(report: &EvalReport, min_steps: usize) -> Slice {
    let mut slice = Slice::default();
    for q in &report.per_question {
        if q.gold_steps >= min_steps {
            slice.add(q.correct);
        }
    }
    slice.finalize()
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::Io)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(Error::Io)?;
    fs::rename(&tmp, path).map_err(Error::Io)?;
    Ok(())
}

/// Run one experiment over the library's test split (optionally truncated
/// to `max_queries`), writing one trace file per query when `trace_dir`
/// is given.
pub fn run_experiment(
    env: &EvalEnv,
    config: &RunConfig,
    trace_dir: Option<&Path>,
) -> Result<EvalReport> {
    run_experiment_with_cache(env, config, trace_dir, None)
}

/// [`run_experiment`] with an optional disk cache for pseudo-labeled
/// chains, so repeated runs against the same backend skip the labeling
/// calls.
pub fn run_experiment_with_cache(
    env: &EvalEnv,
    config: &RunConfig,
    trace_dir: Option<&Path>,
    cache: Option<LabelCache>,
) -> Result<EvalReport> {
    let mut pipeline = Pipeline::new(
        env.library,
        env.pool,
        env.gold,
        env.backend,
        env.vocabulary,
        env.provider,
        config.pipeline_config(),
        config.seed,
    )?;
    if let Some(cache) = cache {
        pipeline = pipeline.with_label_cache(cache);
    }
    let queries: Vec<&DemonstrationRecord> = env.library.test_records().collect();
    let limit = config.max_queries.unwrap_or(queries.len()).min(queries.len());
    let queries = &queries[..limit];
    if queries.is_empty() {
        return Err(Error::validation("the library has no test queries to run"));
    }
    let mut per_question = Vec::with_capacity(queries.len());
    for record in queries {
        let result = pipeline.answer_query(record, config.strategy, config.ablation)?;
        if let Some(dir) = trace_dir {
            let name = format!(
                "{}-{}-{}.json",
                config.strategy, config.ablation, record.id
            );
            let text = serde_json::to_string_pretty(&result.trace)
                .map_err(|e| Error::validation(format!("cannot serialize trace: {e}")))?;
            write_text_atomic(&dir.join(name), &(text + "\n"))?;
        }
        let gold = normalize_answer(&record.answer);
        let predicted = normalize_answer(&result.predicted);
        let family = parse_question(&record.question)
            .map(|q| q.family().to_string())
            .unwrap_or_else(|| "other".to_string());
        per_question.push(PerQuestion {
            id: record.id.clone(),
            family,
            correct: predicted == gold,
            gold,
            predicted,
            gold_steps: env.gold.get(&record.id).map(|c| c.len()).unwrap_or(1),
            model_calls: result.trace.model_calls,
        });
    }
    let head_answers = head_answer_set(env.library);
    let aggregates = compute_aggregates(&per_question, &head_answers);
    Ok(EvalReport {
        config: config.clone(),
        backend_id: env.backend.id().to_string(),
        per_question,
        aggregates,
        adjustment: pipeline.adjustment_summary(),
    })
}

/// Run the base SADL setting plus every ablation, on identical queries
/// and seed. Returns reports in `Ablation::ALL` order.
pub fn run_ablation_suite(
    env: &EvalEnv,
    base: &RunConfig,
    trace_dir: Option<&Path>,
) -> Result<Vec<(Ablation, EvalReport)>> {
    if base.strategy != Strategy::Sadl {
        return Err(Error::config(
            "the ablation suite is defined for the sadl strategy",
        ));
    }
    let mut reports = Vec::with_capacity(Ablation::ALL.len());
    for ablation in Ablation::ALL {
        let config = RunConfig {
            ablation,
            ..base.clone()
        };
        let report = run_experiment(env, &config, trace_dir)?;
        reports.push((ablation, report));
    }
    let ids: Vec<&str> = reports[0].1.per_question.iter().map(|q| q.id.as_str()).collect();
    for (ablation, report) in &reports[1..] {
        let other: Vec<&str> = report.per_question.iter().map(|q| q.id.as_str()).collect();
        if other != ids {
            return Err(Error::validation(format!(
                "ablation '{ablation}' ran a different query set"
            )));
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::config(format!("unknown report format '{other}'"))),
        }
    }
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map(|s| s + "\n")
        .map_err(|e| Error::validation(format!("cannot serialize report: {e}")))
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("id,family,gold,predicted,correct,gold_steps,model_calls\n");
    for q in &report.per_question {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            q.id, q.family, q.gold, q.predicted, q.correct, q.gold_steps, q.model_calls
        ));
    }
    out
}

fn run_label(report: &EvalReport) -> String {
    if report.config.ablation == Ablation::None {
        report.config.strategy.to_string()
    } else {
        format!("{}+{}", report.config.strategy, report.config.ablation)
    }
}

/// Fixed-width comparison table: one row per report, accuracy columns for
/// overall and every question family seen in any report.
pub fn summary_table(reports: &[&EvalReport]) -> String {
    let mut families: Vec<String> = Vec::new();
    for report in reports {
        for family in report.aggregates.per_family.keys() {
            if !families.iter().any(|f| f == family) {
                families.push(family.clone());
            }
        }
    }
    families.sort();
    let label_width = reports
        .iter()
        .map(|r| run_label(r).len())
        .chain(["run".len()])
        .max()
        .unwrap_or(3);
    let mut columns = vec!["overall".to_string(), "binary".to_string(), "open".to_string()];
    columns.extend(families.iter().cloned());
    columns.push("calls".to_string());
    let mut out = format!("{:<label_width$}", "run");
    for column in &columns {
        out.push_str(&format!(" {:>10}", column));
    }
    out.push('\n');
    for report in reports {
        out.push_str(&format!("{:<label_width$}", run_label(report)));
        let a = &report.aggregates;
        let mut cells = vec![a.overall.accuracy, a.binary.accuracy, a.open.accuracy];
        for family in &families {
            cells.push(a.per_family.get(family).map(|s| s.accuracy).unwrap_or(0.0));
        }
        for cell in cells {
            out.push_str(&format!(" {:>10.3}", cell));
        }
        out.push_str(&format!(" {:>10.2}", a.mean_model_calls));
        out.push('\n');
    }
    out
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => report_json(report),
        ReportFormat::Csv => Ok(report_csv(report)),
        ReportFormat::Table => Ok(summary_table(&[report])),
    }
}

/// Write a report under `dir` with the extension implied by the format;
/// returns the path written.
pub fn write_report(
    report: &EvalReport,
    dir: &Path,
    basename: &str,
    format: ReportFormat,
) -> Result<PathBuf> {
    let ext = match format {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
        ReportFormat::Table => "txt",
    };
    let path = dir.join(format!("{basename}.{ext}"));
    write_text_atomic(&path, &render_report(report, format)?)?;
    Ok(path)
}
