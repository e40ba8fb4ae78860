//! End-to-end tests of the `sadl` binary: every subcommand against a
//! small generated corpus, plus the exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sadl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sadl"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    sadl()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn sadl")
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).expect("utf-8 stderr")
}

fn assert_success(output: &Output) {
    assert!(
        output.status.success(),
        "command failed with {:?}\nstdout: {}\nstderr: {}",
        output.status.code(),
        stdout(output),
        stderr(output)
    );
}

const CONFIG: &str = r#"
[data]
library = "data/library.jsonl"
scenes = "data/scenes.json"
gold = "data/gold.json"

[backend]
kind = "oracle"
atomic_error_rate = 0.0
context_repair = true
seed = 1

[run]
strategy = "sadl"
seed = 1

[output]
dir = "out"
format = "json"
"#;

/// A directory with generated data and a config file pointing at it.
fn workspace() -> TempDir {
    let dir = TempDir::new().expect("tempdir");
    let output = run_in(
        dir.path(),
        &[
            "generate",
            "--seed",
            "5",
            "--scenes",
            "12",
            "--questions",
            "240",
            "--out-dir",
            "data",
        ],
    );
    assert_success(&output);
    fs::write(dir.path().join("exp.toml"), CONFIG).expect("write config");
    dir
}

fn read_report(path: &Path) -> serde_json::Value {
    let text = fs::read_to_string(path).expect("read report");
    serde_json::from_str(&text).expect("parse report")
}

fn accuracy(report: &serde_json::Value) -> f64 {
    report["aggregates"]["overall"]["accuracy"]
        .as_f64()
        .expect("overall accuracy")
}

#[test]
fn generate_writes_the_three_dataset_files() {
    let dir = workspace();
    for name in ["library.jsonl", "scenes.json", "gold.json"] {
        let path = dir.path().join("data").join(name);
        assert!(path.is_file(), "missing {name}");
        assert!(fs::metadata(&path).unwrap().len() > 0, "{name} is empty");
    }
    let library = fs::read_to_string(dir.path().join("data/library.jsonl")).unwrap();
    assert_eq!(library.lines().count(), 240);
}

#[test]
fn run_on_a_noiseless_oracle_is_perfect_and_deterministic() {
    let dir = workspace();
    let output = run_in(dir.path(), &["run", "--config", "exp.toml"]);
    assert_success(&output);
    assert!(stdout(&output).contains("report written to"));
    let report_path = dir.path().join("out/sadl.json");
    let report = read_report(&report_path);
    assert_eq!(accuracy(&report), 1.0);
    assert_eq!(report["config"]["strategy"], "sadl");
    assert_eq!(report["backend_id"], "oracle");

    let first = fs::read(&report_path).unwrap();
    let output = run_in(dir.path(), &["run", "--config", "exp.toml"]);
    assert_success(&output);
    assert_eq!(first, fs::read(&report_path).unwrap(), "rerun changed the report");
}

#[test]
fn set_overrides_reach_the_run_config_and_output_paths() {
    let dir = workspace();
    let output = run_in(
        dir.path(),
        &[
            "run",
            "--config",
            "exp.toml",
            "--set",
            "run.strategy=vanilla",
            "--set",
            "run.max_queries=10",
            "--set",
            "output.dir=elsewhere",
        ],
    );
    assert_success(&output);
    let report = read_report(&dir.path().join("elsewhere/vanilla.json"));
    assert_eq!(report["config"]["strategy"], "vanilla");
    assert_eq!(report["per_question"].as_array().unwrap().len(), 10);
    assert_eq!(report["aggregates"]["mean_model_calls"], 1.0);
}

#[test]
fn run_honors_trace_output() {
    let dir = workspace();
    let output = run_in(
        dir.path(),
        &[
            "run",
            "--config",
            "exp.toml",
            "--set",
            "run.max_queries=3",
            "--set",
            "output.traces=true",
        ],
    );
    assert_success(&output);
    let traces: Vec<PathBuf> = fs::read_dir(dir.path().join("out/traces"))
        .expect("trace dir")
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(traces.len(), 3);
    let text = fs::read_to_string(&traces[0]).unwrap();
    let trace: serde_json::Value = serde_json::from_str(&text).expect("trace json");
    assert!(trace["steps"].as_array().unwrap().len() >= 1);
}

#[test]
fn ablate_writes_five_reports_and_a_combined_table() {
    let dir = workspace();
    let output = run_in(
        dir.path(),
        &["ablate", "--config", "exp.toml", "--set", "run.max_queries=5"],
    );
    assert_success(&output);
    let table = stdout(&output);
    for name in [
        "ablation-none.json",
        "ablation-random_demos.json",
        "ablation-no_decomposition.json",
        "ablation-shuffled_pseudo_labels.json",
        "ablation-unknown_pseudo_labels.json",
    ] {
        assert!(dir.path().join("out").join(name).is_file(), "missing {name}");
    }
    for label in ["sadl+random_demos", "sadl+unknown_pseudo_labels"] {
        assert!(table.contains(label), "table lacks row {label}:\n{table}");
    }
}

#[test]
fn ablate_rejects_non_sadl_strategies_as_config_errors() {
    let dir = workspace();
    let output = run_in(
        dir.path(),
        &["ablate", "--config", "exp.toml", "--set", "run.strategy=cot"],
    );
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr(&output));
}

#[test]
fn report_round_trips_between_formats() {
    let dir = workspace();
    assert_success(&run_in(dir.path(), &["run", "--config", "exp.toml"]));
    let csv = run_in(
        dir.path(),
        &["report", "--input", "out/sadl.json", "--format", "csv"],
    );
    assert_success(&csv);
    let csv_text = stdout(&csv);
    let lines: Vec<&str> = csv_text.trim_end().lines().map(str::trim).collect();
    assert_eq!(lines[0], "id,family,gold,predicted,correct,gold_steps,model_calls");
    assert_eq!(lines.len() - 1, 48, "one row per test query");

    let table = run_in(
        dir.path(),
        &[
            "report",
            "--input",
            "out/sadl.json",
            "--format",
            "table",
            "--output",
            "out/sadl.txt",
        ],
    );
    assert_success(&table);
    let text = fs::read_to_string(dir.path().join("out/sadl.txt")).unwrap();
    assert!(text.starts_with("run"), "table header missing:\n{text}");
    assert!(text.contains("overall"));
}

#[test]
fn report_rejects_tampered_aggregates() {
    let dir = workspace();
    assert_success(&run_in(dir.path(), &["run", "--config", "exp.toml"]));
    let path = dir.path().join("out/sadl.json");
    let mut report = read_report(&path);
    report["aggregates"]["overall"]["correct"] = serde_json::json!(0);
    fs::write(&path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    let output = run_in(dir.path(), &["report", "--input", "out/sadl.json"]);
    assert_eq!(output.status.code(), Some(4), "stderr: {}", stderr(&output));
    assert!(stderr(&output).contains("aggregates"));
}

#[test]
fn pseudo_label_fills_a_reusable_cache() {
    let dir = workspace();
    let output = run_in(
        dir.path(),
        &["pseudo-label", "--config", "exp.toml", "--limit", "8"],
    );
    assert_success(&output);
    let text = stdout(&output);
    assert!(text.contains("labeled 8 chains"), "unexpected summary: {text}");
    let cached: Vec<_> = fs::read_dir(dir.path().join("out/labels"))
        .expect("cache dir")
        .collect();
    assert_eq!(cached.len(), 8);

    // A run pointed at the same cache reuses it rather than relabeling.
    let output = run_in(
        dir.path(),
        &[
            "run",
            "--config",
            "exp.toml",
            "--set",
            "output.label_cache=out/labels",
        ],
    );
    assert_success(&output);
    assert!(fs::read_dir(dir.path().join("out/labels")).unwrap().count() >= 8);
}

#[test]
fn index_build_persists_embeddings_into_the_library_file() {
    let dir = workspace();
    let before = fs::read_to_string(dir.path().join("data/library.jsonl")).unwrap();
    assert!(!before.contains("q_emb"));
    let output = run_in(dir.path(), &["index", "build", "--config", "exp.toml"]);
    assert_success(&output);
    assert!(stdout(&output).contains("materialized 480 embedding vectors"));
    let after = fs::read_to_string(dir.path().join("data/library.jsonl")).unwrap();
    assert_eq!(after.lines().count(), 240);
    assert!(after.lines().all(|l| l.contains("\"q_emb\"") && l.contains("\"i_emb\"")));

    // Idempotent: nothing left to fill on the second pass.
    let output = run_in(dir.path(), &["index", "build", "--config", "exp.toml"]);
    assert_success(&output);
    assert!(stdout(&output).contains("materialized 0 embedding vectors"));
}

#[test]
fn prompt_dump_renders_the_final_context_for_a_record() {
    let dir = workspace();
    let output = run_in(
        dir.path(),
        &["prompt", "dump", "--config", "exp.toml", "--id", "q00004"],
    );
    assert_success(&output);
    let text = stdout(&output);
    assert!(text.trim_end().ends_with("Answer:"), "prompt tail: {text}");
    assert!(text.contains("[image: "));
    assert!(text.contains("Sub-question 1:"));

    let step1 = run_in(
        dir.path(),
        &[
            "prompt", "dump", "--config", "exp.toml", "--id", "q00004", "--step", "1",
        ],
    );
    assert_success(&step1);
    assert_ne!(stdout(&step1), text, "step 1 should differ from the final step");

    let out_of_range = run_in(
        dir.path(),
        &[
            "prompt", "dump", "--config", "exp.toml", "--id", "q00004", "--step", "99",
        ],
    );
    assert_eq!(out_of_range.status.code(), Some(2));
}

#[test]
fn exit_codes_separate_config_backend_and_validation_errors() {
    let dir = workspace();

    let missing = run_in(dir.path(), &["run", "--config", "nope.toml"]);
    assert_eq!(missing.status.code(), Some(2));

    let unknown_key = run_in(
        dir.path(),
        &["run", "--config", "exp.toml", "--set", "run.bogus=1"],
    );
    assert_eq!(unknown_key.status.code(), Some(2));
    assert!(stderr(&unknown_key).contains("bogus"));

    let bad_budget = run_in(
        dir.path(),
        &["run", "--config", "exp.toml", "--set", "run.k=3"],
    );
    assert_eq!(bad_budget.status.code(), Some(2));

    fs::write(dir.path().join("empty-scenes.json"), "{}").unwrap();
    let unknown_image = run_in(
        dir.path(),
        &[
            "run",
            "--config",
            "exp.toml",
            "--set",
            "data.scenes=empty-scenes.json",
        ],
    );
    assert_eq!(unknown_image.status.code(), Some(3), "stderr: {}", stderr(&unknown_image));

    let unknown_record = run_in(
        dir.path(),
        &["prompt", "dump", "--config", "exp.toml", "--id", "nope"],
    );
    assert_eq!(unknown_record.status.code(), Some(4));
}

#[test]
fn http_backend_requires_an_endpoint() {
    let dir = workspace();
    let output = run_in(
        dir.path(),
        &["run", "--config", "exp.toml", "--set", "backend.kind=http"],
    );
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("endpoint"));
}

#[test]
fn llm_decomposer_runs_against_the_oracle_scripts() {
    let dir = workspace();
    let output = run_in(
        dir.path(),
        &[
            "run",
            "--config",
            "exp.toml",
            "--set",
            "run.decomposer=llm",
            "--set",
            "run.max_queries=5",
        ],
    );
    assert_success(&output);
    let report = read_report(&dir.path().join("out/sadl.json"));
    assert_eq!(accuracy(&report), 1.0);
}
