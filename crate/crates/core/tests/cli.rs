use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn crossstate(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossstate")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stderr)))
}

fn entry(template: [f64; 3], tau_p: f64) -> Value {
    json!({
        "template": template, "tau_p": tau_p, "F_g": 0.0, "F_p": 0.0, "F_l": 0.4, "tau_b": 0.5,
        "clamped": false, "weights": {"w_g": 0.5, "w_p": 0.3, "w_l": 0.2}
    })
}

fn gallery_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let g = json!({"alice": entry([1.0, 0.0, 0.0], 0.5), "bob": entry([0.0, 1.0, 0.0], 0.5)});
    std::fs::write(dir.path().join("gallery.json"), g.to_string()).unwrap();
    std::fs::write(dir.path().join("a.json"), "[0.9, 0.1, 0.0]").unwrap();
    std::fs::write(dir.path().join("b.json"), "[0.0, 2.0, 0.1]").unwrap();
    dir
}

#[test]
fn verify_accepts_the_owner() {
    let dir = gallery_dir();
    let o = crossstate(&["verify", "--gallery", "gallery.json", "--probe", "a.json", "--user", "alice"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(v["decision"], "Accept");
    assert!(v["score"].as_f64().unwrap() > 0.99);
}

#[test]
fn verify_rejects_an_impostor() {
    let dir = gallery_dir();
    let o = crossstate(&["verify", "--gallery", "gallery.json", "--probe", "b.json", "--user", "alice"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let v = stdout_json(&o);
    assert_eq!(v["decision"], "Reject");
    assert!(v["score"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn identify_names_the_nearest_user() {
    let dir = gallery_dir();
    let o = crossstate(&["identify", "--gallery", "gallery.json", "--probe", "b.json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["user"], "bob");
}

#[test]
fn unknown_user_and_missing_files_fail_with_codes() {
    let dir = gallery_dir();
    let o = crossstate(&["verify", "--gallery", "gallery.json", "--probe", "a.json", "--user", "carol"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["code"], "InsufficientData");

    let o = crossstate(&["identify", "--gallery", "missing.json", "--probe", "a.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["code"], "MissingFile");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossstate(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(crossstate(&["verify", "--gallery", "g.json"], dir.path()).status.code(), Some(2));
    assert_eq!(crossstate(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn malformed_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"sampler": {"classes_per_batch": 8, "samples_per_class": 5}}}"#).unwrap();
    let o = crossstate(&["train", "--config", "bad.json", "--data", "nowhere", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["code"], "ConfigError");
    assert!(e["message"].as_str().unwrap().contains("batch_size"));

    std::fs::write(dir.path().join("broken.json"), "{ nope").unwrap();
    let o = crossstate(&["eval", "--config", "broken.json", "--out", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["code"], "ConfigError");
}

const TINY_RUN: &str = r#"{
  "model": {"branch_kernels": [3, 5], "branch_channels": 2, "deep_channels": [4, 8], "attention_reduction": 4},
  "train": {"epochs": 2, "batch_size": 8, "sampler": {"classes_per_batch": 4, "samples_per_class": 2}}
}"#;

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ok = |args: &[&str]| {
        let o = crossstate(args, p);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout_json(&o)
    };
    let v = ok(&["synth", "--subjects", "4", "--rest-sec", "40", "--ex-sec", "30", "--fs", "100", "--seed", "3", "--out", "data"]);
    assert_eq!(v["records"], 8);
    let v = ok(&["preprocess", "--in", "data", "--out", "segs", "--report", "quality.json"]);
    assert!(v["segments"].as_u64().unwrap() > 100);
    assert!(p.join("quality.json").exists());

    std::fs::write(p.join("run.json"), TINY_RUN).unwrap();
    let trained = ok(&["train", "--config", "run.json", "--data", "segs", "--out", "run", "--mode", "rest2rest"]);
    for f in ["run.json", "history.csv", "checkpoint.bin", "checkpoint.json", "model.json", "report.json", "gallery.json", "embeddings.csv"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    for k in ["acc_pct", "far_pct", "frr_pct", "auc_pct", "eer_pct"] {
        let x = trained[k].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&x), "{k} = {x}");
    }

    // the saved checkpoint reproduces the run's metrics
    let again = ok(&["eval", "--config", "run.json", "--mode", "rest2rest", "--data", "segs", "--model", "run", "--out", "ev/report.json"]);
    assert_eq!(again, trained);
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(p.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, trained);

    // a different config may not reuse the run directory
    std::fs::write(p.join("other.json"), TINY_RUN.replace("\"epochs\": 2", "\"epochs\": 1")).unwrap();
    let o = crossstate(&["train", "--config", "other.json", "--data", "segs", "--out", "run"], p);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["code"], "DigestMismatch");

    let v = ok(&["enroll", "--model", "run", "--data", "segs", "--out", "gallery.json"]);
    assert_eq!(v["users"], 4);
    let g: Value = serde_json::from_str(&std::fs::read_to_string(p.join("gallery.json")).unwrap()).unwrap();
    assert_eq!(g["s01"]["template"].as_array().unwrap().len(), 128);

    let record = std::fs::read_dir(p.join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|f| f.extension().is_some_and(|e| e == "ecg"))
        .unwrap();
    let record = record.to_str().unwrap();
    let v = ok(&["identify", "--gallery", "gallery.json", "--probe", record, "--model", "run"]);
    assert!(v["user"].as_str().unwrap().starts_with('s'));
    let o = crossstate(&["verify", "--gallery", "gallery.json", "--probe", record, "--user", "s01", "--model", "run"], p);
    let v = stdout_json(&o);
    let accept = v["score"].as_f64().unwrap() >= v["tau_p"].as_f64().unwrap();
    assert_eq!(o.status.code(), Some(if accept { 0 } else { 1 }));

    let o = crossstate(&["verify", "--gallery", "gallery.json", "--probe", record, "--user", "s01"], p);
    assert_eq!(o.status.code(), Some(2));
}
