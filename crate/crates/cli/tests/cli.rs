//! End-to-end CLI tests: exit codes, artifact layout, golden reproduction of
//! the bundled configuration, and the snapshot/resume flow.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_speqd")
}

fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/assets")
        .join(name)
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn run_cli(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("binary runs")
}

fn sha256_hex(path: &Path) -> String {
    let bytes = fs::read(path).unwrap_or_else(|e| panic!("read {path:?}: {e}"));
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn shipped_config_run_matches_golden_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_cli(&[
        "run",
        "--config",
        asset("config.json").to_str().unwrap(),
        "--prompts",
        asset("corpus.txt").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let summary = String::from_utf8_lossy(&out.stdout);
    let expected_summary = fs::read_to_string(golden("summary.txt")).unwrap();
    assert_eq!(summary, expected_summary, "summary line drifted");

    let log = fs::read_to_string(dir.path().join("run.log.jsonl")).unwrap();
    let expected_log = fs::read_to_string(golden("run.log.jsonl")).unwrap();
    assert_eq!(log, expected_log, "run log drifted from the golden file");

    let hashes = fs::read_to_string(golden("artifact_hashes.txt")).unwrap();
    for line in hashes.lines() {
        let (name, expected) = line.split_once(' ').expect("hash line");
        let got = sha256_hex(&dir.path().join(name));
        assert_eq!(got, expected, "{name} drifted from golden hash");
    }
}

#[test]
fn invalid_config_exits_2_naming_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(asset("config.json")).unwrap()).unwrap();
    cfg["theta_merge"] = serde_json::json!(0.5);
    cfg["theta_sim"] = serde_json::json!(0.25);
    fs::write(&bad, serde_json::to_string(&cfg).unwrap()).unwrap();

    let out = run_cli(&[
        "run",
        "--config",
        bad.to_str().unwrap(),
        "--prompts",
        asset("corpus.txt").to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("theta_merge"), "stderr: {err}");
}

#[test]
fn missing_prompts_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_cli(&[
        "run",
        "--config",
        asset("config.json").to_str().unwrap(),
        "--prompts",
        dir.path().join("nope.txt").to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_metric_full_protocol_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.jsonl");
    let out = run_cli(&[
        "make-pool",
        "--prompts",
        asset("corpus.txt").to_str().unwrap(),
        "--config",
        asset("config.json").to_str().unwrap(),
        "--out",
        pool.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Full protocol: all pairs of the 100-genome pool.
    let out = run_cli(&[
        "verify-metric",
        "--pool",
        pool.to_str().unwrap(),
        "--n-pairs",
        "4950",
        "--n-triples",
        "4950",
        "--seed",
        "42",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("report is JSON");
    assert_eq!(report["n_pairs_tested"], 4950);
    assert_eq!(report["non_negativity_violations"], 0);
    assert_eq!(report["triangle_violations"], 0);

    // Pool below the minimum size.
    let tiny = dir.path().join("tiny.jsonl");
    let all = fs::read_to_string(&pool).unwrap();
    let two: Vec<&str> = all.lines().take(2).collect();
    fs::write(&tiny, two.join("\n")).unwrap();
    let out = run_cli(&["verify-metric", "--pool", tiny.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Negative control: a corrupted metric must be caught (exit 1).
    let out = Command::new(bin())
        .args(["verify-metric", "--pool", pool.to_str().unwrap(), "--n-pairs", "100", "--n-triples", "100"])
        .env("SPEQD_TEST_CORRUPT_DISTANCE", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn metrics_command_handles_run_dirs_and_degenerate_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = run_cli(&[
        "run",
        "--config",
        asset("config.json").to_str().unwrap(),
        "--prompts",
        asset("corpus.txt").to_str().unwrap(),
        "--out-dir",
        run_dir.to_str().unwrap(),
        "--generations",
        "5",
    ]);
    assert!(out.status.success());

    let out = run_cli(&["metrics", "--input", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["diversity.json", "topics.json", "quantiles.csv", "ecdf.csv"] {
        assert!(run_dir.join("metrics").join(f).exists(), "missing {f}");
    }

    // Baseline run: no species at all; metrics still exit 0 with undefined
    // markers in the report.
    let base_dir = dir.path().join("baseline");
    let out = run_cli(&[
        "run",
        "--config",
        asset("config.json").to_str().unwrap(),
        "--prompts",
        asset("corpus.txt").to_str().unwrap(),
        "--out-dir",
        base_dir.to_str().unwrap(),
        "--generations",
        "3",
        "--baseline",
    ]);
    assert!(out.status.success());
    let out = run_cli(&["metrics", "--input", base_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(base_dir.join("metrics/diversity.json")).unwrap(),
    )
    .unwrap();
    assert!(report["separation_ratio"].is_null());
    assert_eq!(report["qd_score"], 0.0);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let config = asset("config.json");
    let corpus = asset("corpus.txt");

    let out = run_cli(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--prompts",
        corpus.to_str().unwrap(),
        "--out-dir",
        full.to_str().unwrap(),
        "--generations",
        "20",
    ]);
    assert!(out.status.success());

    let out = run_cli(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--prompts",
        corpus.to_str().unwrap(),
        "--out-dir",
        first.to_str().unwrap(),
        "--generations",
        "10",
    ]);
    assert!(out.status.success());
    let out = run_cli(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--resume",
        first.join("snapshot-10.json").to_str().unwrap(),
        "--out-dir",
        second.to_str().unwrap(),
        "--generations",
        "20",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Final snapshots are byte-identical.
    assert_eq!(
        fs::read(full.join("snapshot-20.json")).unwrap(),
        fs::read(second.join("snapshot-20.json")).unwrap()
    );

    // The resumed log continues the uninterrupted one: full log equals the
    // first segment (minus its final record) plus the resumed segment.
    let full_log = fs::read_to_string(full.join("run.log.jsonl")).unwrap();
    let first_log = fs::read_to_string(first.join("run.log.jsonl")).unwrap();
    let second_log = fs::read_to_string(second.join("run.log.jsonl")).unwrap();
    let first_without_final: String = first_log
        .lines()
        .filter(|l| !l.contains("\"type\":\"final\""))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(full_log, format!("{first_without_final}{second_log}"));
}
