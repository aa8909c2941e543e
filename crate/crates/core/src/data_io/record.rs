//! `.ecg` record files and the dataset manifest.
//!
//! A record file is one JSON header line followed by `n` little-endian
//! `f32` samples:
//!
//! ```text
//! {"subject":"s01","state":"rest","fs":300,"n":900,"lead":"II"}\n<900 x f32le>
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::State;

pub const DEFAULT_FS_HZ: f64 = 300.0;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Raw single-lead recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub subject_id: String,
    pub state: State,
    pub fs_hz: f64,
    pub samples: Vec<f32>,
    pub lead: String,
}

impl EcgRecord {
    pub fn new(subject_id: impl Into<String>, state: State, fs_hz: f64, samples: Vec<f32>) -> Self {
        EcgRecord {
            subject_id: subject_id.into(),
            state,
            fs_hz,
            samples,
            lead: "II".to_string(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs_hz > 0.0) || !self.fs_hz.is_finite() {
            return Err(Error::InvalidRecord(format!("sampling rate must be positive, got {}", self.fs_hz)));
        }
        if self.samples.is_empty() {
            return Err(Error::InvalidRecord("record has no samples".into()));
        }
        Ok(())
    }

    pub fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| v as f64).collect()
    }
}

/// Serializes a sampling rate as an integer when it is integral so headers
/// read `"fs":300` rather than `"fs":300.0`.
pub(crate) fn fs_json(fs: f64) -> Value {
    if fs.fract() == 0.0 && fs.abs() < 1e15 {
        json!(fs as i64)
    } else {
        json!(fs)
    }
}

pub(crate) fn encode_f32le(samples: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 4);
    for v in samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_f32le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Splits a file into its header object and binary payload.
pub(crate) fn split_header(path: &Path, bytes: &[u8]) -> Result<(Map<String, Value>, Vec<u8>)> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("no header line terminator"))?;
    let header: Value =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| malformed(&format!("invalid JSON: {e}")))?;
    match header {
        Value::Object(map) => Ok((map, bytes[nl + 1..].to_vec())),
        _ => Err(malformed("header is not a JSON object")),
    }
}

pub(crate) fn header_str(path: &Path, map: &Map<String, Value>, key: &str) -> Result<String> {
    map.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("missing string field '{key}'"),
        })
}

pub(crate) fn header_f64(path: &Path, map: &Map<String, Value>, key: &str) -> Result<f64> {
    map.get(key).and_then(Value::as_f64).ok_or_else(|| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: format!("missing numeric field '{key}'"),
    })
}

pub(crate) fn header_usize(path: &Path, map: &Map<String, Value>, key: &str) -> Result<usize> {
    map.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("missing integer field '{key}'"),
        })
}

pub(crate) fn header_state(path: &Path, map: &Map<String, Value>) -> Result<State> {
    header_str(path, map, "state")?.parse().map_err(|e: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e,
    })
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: impl AsRef<Path>) -> Result<EcgRecord> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (header, payload) = split_header(path, &bytes)?;
    let subject_id = header_str(path, &header, "subject")?;
    let state = header_state(path, &header)?;
    let fs_hz = header_f64(path, &header, "fs")?;
    let n = header_usize(path, &header, "n")?;
    let lead = header
        .get("lead")
        .and_then(Value::as_str)
        .unwrap_or("II")
        .to_string();
    if payload.len() % 4 != 0 || payload.len() / 4 != n {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            declared: n,
            found: payload.len() / 4,
        });
    }
    let record = EcgRecord {
        subject_id,
        state,
        fs_hz,
        samples: decode_f32le(&payload),
        lead,
    };
    record.validate().map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(record)
}

pub fn encode_record(record: &EcgRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let header = json!({
        "subject": record.subject_id,
        "state": record.state.as_str(),
        "fs": fs_json(record.fs_hz),
        "n": record.samples.len(),
        "lead": record.lead,
    });
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    bytes.extend(encode_f32le(&record.samples));
    Ok(bytes)
}

pub fn write_record(record: &EcgRecord, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_record(record)?;
    write_bytes(path.as_ref(), &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub path: PathBuf,
    pub subject: String,
    pub state: State,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub records: Vec<ManifestEntry>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            records: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let bytes = read_bytes(&path)?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::MalformedHeader {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        for entry in &manifest.records {
            let p = dir.as_ref().join(&entry.path);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_bytes(&path, &bytes)
    }

    /// Sorted, deduplicated subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn resolve(&self, dir: impl AsRef<Path>, entry: &ManifestEntry) -> PathBuf {
        dir.as_ref().join(&entry.path)
    }
}
