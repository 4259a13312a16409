mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genctx"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    let text = format!(
        "{}\n[paths]\ndata_dir = \"data\"\nout_dir = \"runs\"\n",
        common::SMALL
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_keys_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--alhpa", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alhpa"), "{}", stderr(&o));

    fs::write(dir.path().join("bad.toml"), "[train]\nalhpa = 1.0\n").unwrap();
    let o = run(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alhpa"));
}

#[test]
fn malformed_and_missing_inputs_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train", "--alpha"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["train", "--config", "missing.toml"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["train", "--steps", "many"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["eval"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn gen_data_writes_both_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(dir.path(), &["gen-data", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for split in ["train", "eval"] {
        assert!(dir.path().join(format!("data/{split}.jsonl")).exists());
        assert!(dir.path().join(format!("data/{split}.jsonl.features")).exists());
    }
    assert!(stdout(&o).contains("context-free ambiguous accuracy"));

    // a different corpus config no longer matches the written manifests
    let o = run(dir.path(), &["train", "--config", &cfg, "--corpus.seed", "5"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn gen_context_fills_the_cache_and_reports_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(dir.path(), &["gen-context", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Previous GT text"));
    assert!(out.contains("generated P4"));
    let cache = fs::read_to_string(dir.path().join("data/contexts.jsonl")).unwrap();
    // 4 prompts × (train + eval) segments that have a successor
    assert_eq!(cache.lines().count(), 4 * (4 + 2) * 3);
    // a second run is served from the cache
    let o = run(dir.path(), &["gen-context", "--config", &cfg]);
    assert!(stdout(&o).contains("(0 generated now)"), "{}", stdout(&o));
}

#[test]
fn train_then_eval_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(dir.path(), &["train", "--config", &cfg, "--variant", "generative-aware", "--steps", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line: serde_json::Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    let ckpt = line["checkpoint"].as_str().unwrap().to_string();
    assert!(Path::new(&ckpt).exists() || dir.path().join(&ckpt).exists());
    assert!(line["metrics"]["context_cosine"].is_number());

    // the GenerativeAware checkpoint evaluates with the generator unusable
    let o = run(
        dir.path(),
        &["eval", "--config", &cfg, "--paths.checkpoint", &ckpt, "--backend", "http"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["variant"], "generative-aware");
    assert!(v["metrics"]["wer"].is_number());
}

#[test]
fn compare_writes_a_report_and_report_replays_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(dir.path(), &["compare", "--config", &cfg, "--steps", "3", "--seeds", "[1, 2]"]);
    let code = o.status.code();
    // the tiny run cannot reach the error thresholds, so the ordering checks fail
    assert_eq!(code, Some(4), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("A (baseline)") && table.contains("E (generative aware)"));
    assert!(table.contains("PASS inference params: A < E < D"));
    let reports: Vec<_> = fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(reports.iter().any(|f| f.starts_with("compare-") && f.ends_with(".json")));
    assert!(!reports.iter().any(|f| f.contains("partial")));

    let o = run(dir.path(), &["report", "--config", &cfg, "--steps", "3", "--seeds", "[1, 2]"]);
    assert_eq!(o.status.code(), code);
    assert_eq!(stdout(&o), table);

    // no report exists for another configuration
    let o = run(dir.path(), &["report", "--config", &cfg, "--steps", "4"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sentiment_comparison_passes_its_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(dir.path(), &["compare", "--config", &cfg, "--steps", "2", "--task", "sentiment"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("macro F1"));
}
