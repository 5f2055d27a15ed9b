use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qroute"))
}

fn bundled(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const SHORT_JSQ: &str = r#"{
  "name": "short_jsq",
  "system": { "arrival_rate": 2.0, "service_rates": [0.5, 2.5, 5.0] },
  "policy": { "kind": "jsq", "tie_break": "lowest_index" },
  "run": { "duration": 2000.0, "seed": 3 }
}"#;

#[test]
fn train_zero_epochs_emits_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled("paper_reference.config");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "0", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let w = json(&dir.path().join("sgs_weights.json"));
    assert_eq!(w["weights"], serde_json::json!([0.5, 0.5, 0.5]));
    assert_eq!(w["epochs"], 0);
    let csv = fs::read_to_string(dir.path().join("sgs_train.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,w_1,w_2,w_3,x_1,x_2,x_3,td_error,alpha,cumulative_cost,sim_time,queue_area,accepted_steps"
    );
    assert_eq!(lines.count(), 1);
    assert!(dir.path().join("sgs_train.meta.json").exists());
}

#[test]
fn train_writes_logs_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled("paper_reference.config");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "20000",
        "--log-every",
        "5000",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final weights"));
    assert!(stdout.contains("time-averaged total queue"));
    let csv = fs::read_to_string(dir.path().join("sgs_train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    let jsonl = fs::read_to_string(dir.path().join("sgs_train.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 5);
    for line in jsonl.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["weights"].as_array().unwrap().len(), 3);
    }
    assert_eq!(json(&dir.path().join("sgs_weights.json"))["result"]["verdict"], "completed");
}

#[test]
fn overload_training_reports_instability() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled("overload.config");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unstable"));
    let w = json(&dir.path().join("overload_weights.json"));
    assert_eq!(w["result"]["verdict"], "unstable");
    assert!(w["result"]["max_queue"].as_u64().unwrap() > 500);
}

#[test]
fn invalid_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), "typo.config", &SHORT_JSQ.replace("\"seed\"", "\"sed\""));
    let out = run(&["evaluate", "--config", typo.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let missing = dir.path().join("nope.config");
    assert_eq!(run(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn evaluate_is_deterministic_and_appends_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "jsq.config", SHORT_JSQ);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--out-dir", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    for f in ["results.csv", "short_jsq_eval.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let out = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out-dir", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(results.lines().filter(|l| l.starts_with("id,")).count(), 1);
    assert_eq!(results.lines().count(), 3);
    let report = json(&a.join("short_jsq_eval.json"));
    assert!(report["mean_system_time"].as_f64().unwrap() > 0.0);
}

#[test]
fn evaluate_with_trained_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled("paper_reference.config");
    let d = dir.path().to_str().unwrap();
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "50000", "--out-dir", d]).status.code(), Some(0));
    let weights = dir.path().join("sgs_weights.json");
    let out = run(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--duration",
        "5000",
        "--out-dir",
        d,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let t = json(&dir.path().join("sgs_eval.json"))["mean_system_time"].as_f64().unwrap();
    assert!(t > 0.2 && t < 0.6, "{t}");
}

#[test]
fn nn_checkpoint_roundtrip_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled("nn.config");
    let ckpt = dir.path().join("net.bin");
    let d = dir.path().to_str().unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "2000",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out-dir",
        d,
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(ckpt.exists());
    let out = run(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--duration",
        "1000",
        "--out-dir",
        d,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--out-dir", d]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_against_itself_and_mismatched_systems() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "jsq.config", SHORT_JSQ);
    let d = dir.path().to_str().unwrap();
    let out = run(&["compare", "--config", cfg.to_str().unwrap(), "--baseline", "short_jsq", "--out-dir", d]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "id,avg_system_time,avg_system_time_little,normalized");
    assert!(csv.lines().nth(1).unwrap().ends_with(",1"));

    let other = write_config(
        dir.path(),
        "other.config",
        &SHORT_JSQ.replace("2.0,", "3.0,").replace("short_jsq", "other"),
    );
    let out = run(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--config",
        other.to_str().unwrap(),
        "--baseline",
        "short_jsq",
        "--out-dir",
        d,
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["compare", "--config", cfg.to_str().unwrap(), "--baseline", "missing", "--out-dir", d]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_sgs_against_jsq_with_learning_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let sgs = bundled("paper_reference.config");
    let jsq = bundled("jsq.config");
    let out = run(&[
        "compare",
        "--config",
        sgs.to_str().unwrap(),
        "--config",
        jsq.to_str().unwrap(),
        "--baseline",
        "jsq",
        "--epochs",
        "100000",
        "--duration",
        "20000",
        "--learning-curve",
        "--out-dir",
        d,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let ratio: f64 = csv
        .lines()
        .find(|l| l.starts_with("sgs,"))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(ratio < 0.7, "{ratio}");
    let curve = fs::read_to_string(dir.path().join("learning_curve.csv")).unwrap();
    let epochs: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(epochs, ["1000", "10000", "100000"]);
}

#[test]
fn drift_report_outputs_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = write_config(
        dir.path(),
        "learned.config",
        r#"{
          "name": "learned",
          "system": { "arrival_rate": 2.0, "service_rates": [0.5, 2.5, 5.0] },
          "policy": { "kind": "wsq_softmax", "temperature": 0.01, "weights": [0.60, 0.49, 0.15] },
          "run": { "seed": 5 }
        }"#,
    );
    let c = cfg.to_str().unwrap();
    let out = run(&["drift-report", "--config", c, "--states", "ray:0..50", "--samples", "500", "--out-dir", d]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = json(&dir.path().join("learned_drift_fit.json"));
    assert!(fit["epsilon"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(dir.path().join("learned_drift.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "state,v,mean_drift,std_error");
    assert_eq!(csv.lines().count(), 52);
    assert!(csv.lines().nth(1).unwrap().starts_with("(0 0 0),0,"));

    let out = run(&["drift-report", "--config", c, "--states", "", "--out-dir", d]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["drift-report", "--config", c, "--states", "list:0,0,0", "--out-dir", d]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
    let out = run(&[
        "drift-report",
        "--config",
        c,
        "--states",
        "grid:0..3",
        "--lyapunov",
        "exponential",
        "--samples",
        "200",
        "--out-dir",
        d,
    ]);
    assert_eq!(out.status.code(), Some(0));
}
