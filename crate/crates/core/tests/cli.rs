use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dacl::cli::{ReportSummary, RunConfig, RunResult};
use dacl::data;
use dacl::math::linalg;
use dacl::model::load_checkpoint;
use dacl::theory::TheoremReport;
use dacl::train::MetricsRecord;

fn dacl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacl"))
        .args(args)
        .env("DACL_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = dacl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Small blobs CSV plus a three-epoch run config next to it.
fn small_run(dir: &Path) -> PathBuf {
    let csv = dir.join("blobs.csv");
    ok(&["gen-data", "blobs", "--n", "400", "--d", "6", "--separation", "4", "--out", &s(&csv)]);
    let cfg = serde_json::json!({
        "data": { "path": csv, "test_fraction": 0.25 },
        "train": {
            "encoder_widths": [12, 12],
            "head_widths": [12, 6],
            "batch_size": 50,
            "epochs": 3,
            "warmup_epochs": 1,
            "eval": { "epochs": 4, "batch_size": 50 }
        }
    });
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn metrics(path: &Path) -> Vec<MetricsRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn lowrank_csv_round_trips_with_its_rank() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("low.csv");
    ok(&["gen-data", "lowrank", "--n", "200", "--d", "10", "--r", "3", "--seed", "4", "--out", &s(&csv)]);
    let ds = data::load_csv(&csv, None).unwrap();
    assert_eq!(ds.features.shape(), (200, 10));
    assert!(ds.labels.is_none());
    let (eig, _) = linalg::sym_eigen(&linalg::second_moment(&ds.features)).unwrap();
    assert_eq!(linalg::numerical_rank(&eig), 3);
}

#[test]
fn missing_config_is_an_io_failure_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("nowhere.json");
    let out = dacl(&["pretrain", "--config", &s(&cfg), "--out-dir", &s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.json"));
}

#[test]
fn bad_usage_exits_two_and_help_exits_zero() {
    assert_eq!(dacl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dacl(&["verify", "--theorem", "7", "--out", "x.json"]).status.code(), Some(2));
    assert_eq!(dacl(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"data": {"path": "x.csv"}, "train": {"epochz": 3}}"#).unwrap();
    let out = dacl(&["pretrain", "--config", &s(&cfg), "--out-dir", &s(&dir.path().join("o"))]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_dacl"))
        .args(["verify", "--theorem", "1", "--out", "unused.json"])
        .env("DACL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_writes_parseable_reports() {
    let dir = tempfile::tempdir().unwrap();
    for (theorem, noise) in [("1", "mixup"), ("1", "gaussian"), ("2", "mixup"), ("4", "mixup"), ("grad", "mixup")] {
        let out = dir.path().join(format!("{theorem}_{noise}.json"));
        ok(&["verify", "--theorem", theorem, "--noise", noise, "--seed", "2", "--out", &s(&out)]);
        let r: TheoremReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert!(r.theorem.starts_with(theorem), "{}", r.theorem);
        assert!(r.passed, "{theorem}/{noise}: {r:?}");
    }
}

#[test]
fn pretrain_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--config", &s(&cfg), "--out-dir", &s(&pre)]);

    let records = metrics(&pre.join("metrics.jsonl"));
    assert_eq!(records.len(), 3 * 6);
    assert!(records.windows(2).all(|w| w[0].epoch <= w[1].epoch && w[0].step < w[1].step));
    assert!(records.iter().all(|r| r.phase == "pretrain" && r.loss.is_finite() && r.seconds == 0.0));

    let enc = load_checkpoint(pre.join("encoder.ckpt")).unwrap();
    assert_eq!(enc.spec.input_dim(), 6);
    assert_eq!(enc.spec.output_dim(), 12);
    assert_eq!(load_checkpoint(pre.join("head.ckpt")).unwrap().spec.output_dim(), 6);

    let eval = dir.path().join("eval");
    ok(&["linear-eval", "--config", &s(&cfg), "--out-dir", &s(&eval), "--encoder", &s(&pre.join("encoder.ckpt"))]);
    let result: RunResult = serde_json::from_str(&std::fs::read_to_string(eval.join("result.json")).unwrap()).unwrap();
    assert_eq!(result.method, "dacl");
    assert_eq!(result.epochs, 4);
    assert!((0.0..=1.0).contains(&result.accuracy));
    assert!(metrics(&eval.join("metrics.jsonl")).iter().all(|r| r.phase == "linear_eval"));
}

#[test]
fn encoder_width_mismatch_is_a_contract_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--config", &s(&cfg), "--out-dir", &s(&pre)]);
    let other = dir.path().join("wide.csv");
    ok(&["gen-data", "blobs", "--n", "400", "--d", "9", "--separation", "4", "--out", &s(&other)]);
    let mut run: RunConfig = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    run.data.path = other;
    let wide = dir.path().join("wide.json");
    std::fs::write(&wide, serde_json::to_string(&run).unwrap()).unwrap();
    let out = dacl(&["linear-eval", "--config", &s(&wide), "--out-dir", &s(&dir.path().join("e")), "--encoder", &s(&pre.join("encoder.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let first = dir.path().join("first");
    ok(&["pretrain", "--config", &s(&cfg), "--out-dir", &s(&first)]);
    let echo = first.join("config.json");
    let echoed: RunConfig = serde_json::from_str(&std::fs::read_to_string(&echo).unwrap()).unwrap();
    assert_eq!(echoed.train.epochs, 3);
    assert_eq!(echoed.train.temperature, 1.0);
    let second = dir.path().join("second");
    ok(&["pretrain", "--config", &s(&echo), "--out-dir", &s(&second)]);
    for file in ["metrics.jsonl", "encoder.ckpt", "head.ckpt", "config.json"] {
        assert_eq!(std::fs::read(first.join(file)).unwrap(), std::fs::read(second.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn baselines_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let sup = dir.path().join("sup");
    let none = dir.path().join("none");
    ok(&["supervised", "--config", &s(&cfg), "--out-dir", &s(&sup)]);
    ok(&["linear-eval", "--config", &s(&cfg), "--out-dir", &s(&none)]);
    let good = dir.path().join("t1.json");
    ok(&["verify", "--theorem", "1", "--out", &s(&good)]);

    let out_dir = dir.path().join("report");
    let results = [s(&sup.join("result.json")), s(&none.join("result.json"))];
    ok(&["report", "--results", &results[0], &results[1], "--theorems", &s(&good), "--out-dir", &s(&out_dir)]);
    let summary: ReportSummary = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.methods.keys().collect::<Vec<_>>(), ["no_pretraining", "supervised"]);
    assert!(summary.theorems.all_passed);
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("method,accuracy,seed,epochs"));

    let mut failing: TheoremReport = serde_json::from_str(&std::fs::read_to_string(&good).unwrap()).unwrap();
    failing.passed = false;
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&failing).unwrap()).unwrap();
    let mixed = dir.path().join("mixed");
    ok(&["report", "--theorems", &s(&good), &s(&bad), "--out-dir", &s(&mixed)]);
    let summary: ReportSummary = serde_json::from_str(&std::fs::read_to_string(mixed.join("summary.json")).unwrap()).unwrap();
    assert!(!summary.theorems.all_passed);
    assert_eq!(summary.theorems.reports.len(), 2);
}

#[test]
fn report_without_inputs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dacl(&["report", "--out-dir", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no inputs"));
}
