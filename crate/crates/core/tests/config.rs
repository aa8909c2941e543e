use std::path::Path;

use crossstate_core::config::{canonical_json, RunConfig, RUN_CONFIG_JSON};
use crossstate_core::Error;

#[test]
fn empty_file_gives_defaults() {
    let cfg = RunConfig::from_json("", Path::new("run.json")).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.loss.alpha, 0.05);
    assert_eq!(cfg.train.lr, 4e-4);
    assert_eq!(cfg.train.batch_size, 32);
    assert_eq!(cfg.train.seed, 42);
    assert_eq!(cfg.train.epochs, 200);
    assert_eq!(RunConfig::from_json("{}", Path::new("run.json")).unwrap(), cfg);
}

#[test]
fn partial_sections_keep_other_defaults() {
    let cfg = RunConfig::from_json(r#"{"train": {"epochs": 7}, "weights": {"w_l": 0.4}}"#, Path::new("x")).unwrap();
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.train.lr, 4e-4);
    assert_eq!(cfg.weights.w_l, 0.4);
    assert_eq!(cfg.weights.w_g, 0.5);
}

#[test]
fn sampler_mismatch_is_a_config_error() {
    let text = r#"{"train": {"batch_size": 32, "sampler": {"classes_per_batch": 8, "samples_per_class": 5}}}"#;
    match RunConfig::from_json(text, Path::new("x")) {
        Err(Error::ConfigError(errs)) => {
            assert_eq!(errs.len(), 1);
            assert!(errs[0].contains("batch_size"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_violation_is_listed() {
    let text = r#"{"train": {"lr": -1, "sampler": {"classes_per_batch": 8, "samples_per_class": 5}},
                  "model": {"branch_kernels": [3, 4, 7, 11]}, "weights": {"w_p": -0.5}}"#;
    match RunConfig::from_json(text, Path::new("x")) {
        Err(Error::ConfigError(errs)) => assert!(errs.len() >= 4, "{errs:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_json_is_a_config_error() {
    assert!(matches!(RunConfig::from_json("{not json", Path::new("x")), Err(Error::ConfigError(_))));
    assert!(matches!(RunConfig::from_json(r#"{"train": {"lr": "fast"}}"#, Path::new("x")), Err(Error::ConfigError(_))));
}

#[test]
fn digest_is_stable_and_content_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"train": {"epochs": 3, "seed": 9}}"#).unwrap();
    let a = RunConfig::load(&path).unwrap();
    let b = RunConfig::load(&path).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(a.digest().len(), 64);
    std::fs::write(&path, r#"{"train": {"seed": 9, "epochs": 3}}"#).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap().digest(), a.digest());
    let c = RunConfig { train: crossstate_core::training::TrainConfig { epochs: 4, ..a.train.clone() }, ..a.clone() };
    assert_ne!(c.digest(), a.digest());
}

#[test]
fn canonical_json_sorts_keys() {
    let v: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": {"d": [1, {"z": 0, "y": 1}], "c": null}}"#).unwrap();
    assert_eq!(canonical_json(&v), r#"{"a":{"c":null,"d":[1,{"y":1,"z":0}]},"b":1}"#);
}

#[test]
fn run_directory_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = RunConfig::default();
    a.claim_run_dir(dir.path()).unwrap();
    a.claim_run_dir(dir.path()).unwrap();
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(RUN_CONFIG_JSON)).unwrap()).unwrap();
    assert_eq!(written["digest"], a.digest());
    let b = RunConfig { train: crossstate_core::training::TrainConfig { seed: 1, ..a.train.clone() }, ..a.clone() };
    assert!(matches!(b.claim_run_dir(dir.path()), Err(Error::DigestMismatch { .. })));
}

#[test]
fn split_follows_the_training_seed() {
    let mut cfg = RunConfig::default();
    cfg.train.seed = 77;
    let s = cfg.split_spec(crossstate_core::data_io::SplitMode::Rest2Exercise);
    assert_eq!(s.seed, 77);
    assert_eq!(s.mode, crossstate_core::data_io::SplitMode::Rest2Exercise);
}
