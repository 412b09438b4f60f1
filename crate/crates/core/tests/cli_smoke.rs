//! End-to-end runs of the `trendlens` binary on a small synthetic catalog.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_trendlens");

const CONFIG: &str = r#"
seed = 5
triples = 10

[synth]
n_products = 300

[forest]
n_trees = 50

[ablation]
cases = 10
"#;

const STAGES: [&str; 10] = [
    "synth",
    "ingest",
    "clean",
    "cluster",
    "score",
    "label",
    "train",
    "eval-triples",
    "ablate",
    "report",
];

fn trendlens(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("trendlens.toml");
    if !config.exists() {
        std::fs::write(&config, CONFIG).unwrap();
    }
    Command::new(BIN)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_all(dir: &Path) {
    for stage in STAGES {
        let out = trendlens(dir, &[stage]);
        assert!(
            out.status.success(),
            "{stage} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn manifest(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("out/manifest.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn output_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut all = BTreeMap::new();
    for entry in manifest(dir) {
        for (path, hash) in entry["outputs"].as_object().unwrap() {
            all.insert(path.clone(), hash.as_str().unwrap().to_string());
        }
    }
    all
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr has an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {last}"))
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path());
    run_all(b.path());

    let entries = manifest(a.path());
    let commands: Vec<&str> = entries.iter().map(|e| e["command"].as_str().unwrap()).collect();
    assert_eq!(commands, STAGES);
    let hash = &entries[0]["config_hash"];
    assert!(entries.iter().all(|e| &e["config_hash"] == hash));

    let out = a.path().join("out");
    for file in [
        "catalog.jsonl",
        "schema.json",
        "phrases.csv",
        "groups.json",
        "features.json",
        "influence.csv",
        "labels.json",
        "model.forest",
        "encoder.json",
        "metrics.json",
        "triples.csv",
        "triples_summary.csv",
        "ablation.csv",
        "reports/table1_accuracy.csv",
        "reports/table2_triplets.csv",
        "reports/table3_ablation.csv",
        "reports/sales_histogram.csv",
    ] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    let model = std::fs::read(out.join("model.forest")).unwrap();
    assert!(model.starts_with(b"TRENDLENS-FOREST v1\n"));

    let metrics: Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["test_accuracy"].as_f64().unwrap() > 0.5, "{metrics}");

    let hashes = output_hashes(a.path());
    assert_eq!(hashes, output_hashes(b.path()));
    for (path, hash) in &hashes {
        let bytes = std::fs::read(out.join(path)).unwrap();
        assert_eq!(&trendlens::util::sha256_hex(&bytes), hash, "{path}");
    }
}

#[test]
fn stdout_lists_written_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = trendlens(dir.path(), &["synth"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.ends_with("  raw/catalog.jsonl")), "{stdout}");
}

#[test]
fn missing_upstream_artifact_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = trendlens(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    let line = error_line(&out);
    assert_eq!(line["exit_code"], 2);
    assert_eq!(line["error"], "missing_artifact");
    let message = line["message"].as_str().unwrap();
    assert!(message.contains("labels.json"), "{message}");
}

#[test]
fn unsupported_class_count_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = trendlens(dir.path(), &["--classes", "7", "synth"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["exit_code"], 3);
}

#[test]
fn malformed_catalog_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    std::fs::write(
        &input,
        "{\"id\":\"a\",\"caption\":\"red\",\"sales\":-1.0}\n",
    )
    .unwrap();
    let out = trendlens(dir.path(), &["ingest", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
