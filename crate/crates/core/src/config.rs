//! Run configuration: every knob of one experiment plus a content digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adaptive_auth::ThresholdWeights;
use crate::data_io::{read_bytes, write_bytes, SplitMode, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::training::TrainConfig;

pub const RUN_CONFIG_JSON: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Raw dataset (`manifest.json`) or preprocessed segment directory (`segments.json`).
    pub dataset: Option<PathBuf>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub mode: SplitMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: None,
            train_fraction: 0.8,
            val_fraction: 0.2,
            mode: SplitMode::Rest2Rest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub weights: ThresholdWeights,
    pub preprocess: PreprocessConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Every violated constraint across the nested sections.
    ///
    /// `model.n_subjects` is set from the training data at run time, so it is
    /// not checked here.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = ModelConfig {
            n_subjects: self.model.n_subjects.max(2),
            ..self.model.clone()
        }
        .validate();
        errs.extend(self.train.validate());
        errs.extend(self.loss.validate());
        errs.extend(self.weights.validate());
        errs.extend(self.split_spec(self.data.mode).validate());
        errs
    }

    /// Split settings for `mode`; the split shares the training seed.
    pub fn split_spec(&self, mode: SplitMode) -> SplitSpec {
        SplitSpec {
            train_fraction: self.data.train_fraction,
            val_fraction: self.data.val_fraction,
            seed: self.train.seed,
            mode,
        }
    }

    /// SHA-256 over the canonical JSON form (object keys sorted, compact).
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serialises");
        let mut h = Sha256::new();
        h.update(canonical_json(&v).as_bytes());
        hex::encode(h.finalize())
    }

    /// Parses a config file; missing fields take their defaults and an empty
    /// file yields the full default configuration.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = if text.trim().is_empty() {
            RunConfig::default()
        } else {
            serde_json::from_str(text).map_err(|e| Error::ConfigError(vec![format!("{}: {e}", origin.display())]))?
        };
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::ConfigError(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::ConfigError(vec![format!("{} is not UTF-8", path.display())]))?;
        Self::from_json(&text, path)
    }

    /// The resolved config with its digest, as written into run directories.
    pub fn resolved_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serialises");
        v.as_object_mut().expect("object").insert("digest".into(), Value::String(self.digest()));
        v
    }

    /// Records the config in `dir`, refusing to reuse a directory that holds
    /// a run of a different config.
    pub fn claim_run_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_JSON);
        let digest = self.digest();
        if path.exists() {
            let existing: Value = serde_json::from_slice(&read_bytes(&path)?).map_err(|e| Error::MalformedHeader {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let old = existing.get("digest").and_then(Value::as_str).unwrap_or("").to_string();
            if old != digest {
                return Err(Error::DigestMismatch {
                    dir: dir.to_path_buf(),
                    existing: old,
                    new: digest,
                });
            }
            return Ok(());
        }
        write_bytes(&path, &serde_json::to_vec_pretty(&self.resolved_json()).expect("config serialises"))
    }
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
