use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use radiot::sim::{default_environment, CampaignSchedule, Simulator, DEFAULT_START_TIME};
use radiot::spectrum::{write_sweep_csv, ProbeConfig, WaterfallReader};
use serde_json::json;

fn radiot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radiot")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, seed: u64, extra: &[&str]) -> Output {
    let seed = seed.to_string();
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", &seed];
    args.extend_from_slice(extra);
    radiot(&args)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, value: serde_json::Value) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    p
}

fn small_run(evaluation: serde_json::Value) -> serde_json::Value {
    json!({
        "reference": {"name": "reference", "source": "simulated", "start_time": DEFAULT_START_TIME, "duration_s": 1800.0},
        "evaluation": evaluation,
        "slices": ["860000-870000"],
        "training": {"learning_rate": 1e-3, "momentum": 0.9, "batch_size": 32, "max_epochs": 3,
                     "min_improvement": 1e-7, "patience": 10, "seed": 0},
        "train_stride": 2
    })
}

fn attack_dataset() -> serde_json::Value {
    json!([{
        "name": "attack", "source": "simulated", "start_time": DEFAULT_START_TIME + 86400.0, "duration_s": 1200.0,
        "schedule": {"campaign_count": 0, "campaign_length_s": 0.0, "inter_campaign_gap_s": 0.0,
                     "intra_attack_gap_s": 0.0, "attack_order": [],
                     "dos_attacks": [{"attack_id": 7, "offset_s": 400.0}]}
    }])
}

#[test]
fn simulate_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"reference": {"name": "reference", "source": "simulated", "start_time": DEFAULT_START_TIME, "duration_s": 120.0}}),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run("simulate", &cfg, &a, 5, &[]));
    ok(&run("simulate", &cfg, &b, 5, &[]));
    let wa = fs::read(a.join("datasets/reference.rdio")).unwrap();
    assert_eq!(wa, fs::read(b.join("datasets/reference.rdio")).unwrap());
    let count = WaterfallReader::new(wa.as_slice()).count();
    assert_eq!(count, 32); // floor(120 / 3.75)
    assert_eq!(
        fs::read(a.join("datasets/reference_truth.csv")).unwrap(),
        fs::read(b.join("datasets/reference_truth.csv")).unwrap()
    );
}

#[test]
fn two_clean_hours_make_1920_waterfalls() {
    let sim = Simulator::new(&default_environment(), &CampaignSchedule::clean(), DEFAULT_START_TIME, 7200.0).unwrap();
    assert_eq!(sim.waterfall_count(), 1920);
}

#[test]
fn unknown_attack_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"reference": {"name": "reference", "source": "simulated", "start_time": 0.0, "duration_s": 60.0,
                "schedule": {"campaign_count": 0, "campaign_length_s": 0.0, "inter_campaign_gap_s": 0.0,
                             "intra_attack_gap_s": 0.0, "attack_order": [],
                             "dos_attacks": [{"attack_id": 9, "offset_s": 0.0}]}}}),
    );
    let o = run("simulate", &cfg, &dir.path().join("out"), 0, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error[config]") && err.contains("9"), "{err}");
}

#[test]
fn missing_config_and_untrained_detect_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("pipeline", &dir.path().join("nope.json"), dir.path(), 0, &[]);
    assert_eq!(o.status.code(), Some(3));
    let cfg = write_config(dir.path(), small_run(attack_dataset()));
    let o = run("detect", &cfg, &dir.path().join("out"), 0, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[input]"));
}

#[test]
fn clean_pipeline_reports_tnr_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), small_run(json!([])));
    let out = dir.path().join("out");
    ok(&run("pipeline", &cfg, &out, 1, &[]));
    let csv = fs::read_to_string(out.join("reports/testing.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "860000-870000");
    assert!(!row[3].is_empty(), "tnr present");
    assert!(row[4].is_empty() && row[5].is_empty(), "no precision or recall without attacks");
    for f in ["manifest.json", "slices/860000-870000/model.json", "slices/860000-870000/train_features.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["reference"]["attacks"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn reused_models_reproduce_the_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), small_run(attack_dataset()));
    let out = dir.path().join("out");
    ok(&run("pipeline", &cfg, &out, 3, &[]));
    let first = fs::read(out.join("reports/attack.csv")).unwrap();
    let table = fs::read(out.join("reports/attack.txt")).unwrap();
    ok(&run("pipeline", &cfg, &out, 3, &["--reuse-models"]));
    assert_eq!(first, fs::read(out.join("reports/attack.csv")).unwrap());
    assert_eq!(table, fs::read(out.join("reports/attack.txt")).unwrap());
    // evaluate alone rebuilds the same files from the detection output
    fs::remove_dir_all(out.join("reports")).unwrap();
    ok(&run("evaluate", &cfg, &out, 3, &[]));
    assert_eq!(first, fs::read(out.join("reports/attack.csv")).unwrap());
    let curve = fs::read_to_string(out.join("detect/attack/860000-870000_curve.csv")).unwrap();
    assert_eq!(curve.lines().filter(|l| l.ends_with(",1")).count(), 1);
}

#[test]
fn leaking_reference_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_run(json!([]));
    v["reference"] = attack_dataset()[0].clone();
    let cfg = write_config(dir.path(), v);
    let o = run("pipeline", &cfg, &dir.path().join("out"), 0, &[]);
    assert_eq!(o.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[leakage]"));
}

fn capture(dir: &Path, sweeps: usize) -> PathBuf {
    let sim = Simulator::new(&default_environment(), &CampaignSchedule::clean(), DEFAULT_START_TIME, 30.0).unwrap();
    let probe = ProbeConfig::default();
    let rows: Vec<_> = (0..sweeps).map(|j| sim.sweep(j)).collect();
    let mut text = Vec::new();
    write_sweep_csv(&rows, &probe, 25, &mut text).unwrap();
    let p = dir.join("capture.csv");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn ingest_rebuilds_waterfalls_from_a_capture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let csv = capture(dir.path(), 250);
    let out = dir.path().join("out");
    let o = run("ingest", &cfg, &out, 0, &["--input", csv.to_str().unwrap()]);
    ok(&o);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "2 waterfalls");
    let bytes = fs::read(out.join("datasets/capture.rdio")).unwrap();
    let back: Vec<_> = WaterfallReader::new(bytes.as_slice()).map(Result::unwrap).collect();
    let sim = Simulator::new(&default_environment(), &CampaignSchedule::clean(), DEFAULT_START_TIME, 30.0).unwrap();
    let cfg_arc = Arc::new(ProbeConfig::default());
    for (i, w) in back.iter().enumerate() {
        assert_eq!(w.config(), &cfg_arc);
        assert_eq!(w.data(), sim.waterfall(i).data());
    }
}

#[test]
fn ingest_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("out");
    let o = run("ingest", &cfg, &out, 0, &["--input", empty.to_str().unwrap()]);
    ok(&o);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "0 waterfalls");
    assert_eq!(fs::read(out.join("datasets/capture.rdio")).unwrap().len(), 0);

    let odd = dir.path().join("odd.csv");
    fs::write(&odd, "2024-01-01, 00:00:00.000000, 400000000, 400500000, 250000.00, 8192, -90.0, -91.0\n").unwrap();
    let o = run("ingest", &cfg, &out, 0, &["--input", odd.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error["));
}
