//! Signal conditioning and segmentation.
//!
//! [`preprocess_record`] runs band-pass -> high-pass -> z-score -> R-peak
//! detection -> R-anchored windowing -> quality gate, in that order.

mod filter;
mod qrs;
mod quality;
mod segment;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use filter::{design_butterworth, filter_forward, zscore, FilterKind, IirFilter};
pub use qrs::detect_r_peaks;
pub use quality::{band_power_ratio, classify, is_clipped, quality_gate, QualityConfig, QualityReport, RawContext, Rejection};
pub use segment::{r_offset, segment_around_peaks, segment_length, Segment, Segmentation};

use crate::data_io::{
    decode_f32le, encode_f32le, fs_json, header_f64, header_state, header_str, header_usize, read_bytes, read_record,
    split_header, write_bytes, DatasetManifest, EcgRecord,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub bandpass_order: usize,
    pub bandpass_hz: (f64, f64),
    pub highpass_order: usize,
    pub highpass_hz: f64,
    pub quality: QualityConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            bandpass_order: 4,
            bandpass_hz: (0.5, 40.0),
            highpass_order: 1,
            highpass_hz: 0.5,
            quality: QualityConfig::default(),
        }
    }
}

/// Band-pass then high-pass filtering of a raw signal.
pub fn condition(x: &[f64], fs_hz: f64, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    let bp = design_butterworth(
        cfg.bandpass_order,
        FilterKind::Bandpass,
        &[cfg.bandpass_hz.0, cfg.bandpass_hz.1],
        fs_hz,
    )?;
    let hp = design_butterworth(cfg.highpass_order, FilterKind::Highpass, &[cfg.highpass_hz], fs_hz)?;
    filter_forward(&hp, &filter_forward(&bp, x)?)
}

pub fn preprocess_record(record: &EcgRecord, cfg: &PreprocessConfig) -> Result<(Vec<Segment>, QualityReport)> {
    record.validate()?;
    let raw = record.samples_f64();
    let fs = record.fs_hz;
    let normalized = zscore(&condition(&raw, fs, cfg)?)?;
    let peaks = detect_r_peaks(&normalized, fs);
    let seg = segment_around_peaks(&normalized, &peaks, record.state, fs, &record.subject_id);

    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let len = segment_length(record.state, fs);
    let r_idx = r_offset(len);
    let windows: Vec<RawContext<'_>> = peaks
        .iter()
        .filter(|&&p| p >= r_idx && p - r_idx + len <= raw.len())
        .map(|&p| RawContext {
            window: &raw[p - r_idx..p - r_idx + len],
            max,
            min,
        })
        .collect();
    debug_assert_eq!(windows.len(), seg.segments.len());
    let (passed, mut report) = quality::quality_gate_with_raw(seg.segments, Some(windows), &cfg.quality);
    report.n_input += seg.truncated;
    report.boundary_truncated += seg.truncated;
    Ok((passed, report))
}

/// Segments of a whole dataset directory plus the merged quality report.
pub fn preprocess_dataset(dir: impl AsRef<Path>, cfg: &PreprocessConfig) -> Result<(Vec<Segment>, QualityReport)> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::load(dir)?;
    let mut all = Vec::new();
    let mut report = QualityReport::default();
    for entry in &manifest.records {
        let rec = read_record(manifest.resolve(dir, entry))?;
        let (segs, r) = preprocess_record(&rec, cfg)?;
        all.extend(segs);
        report.merge(&r);
    }
    Ok((all, report))
}

pub const SEGMENT_INDEX_FILE: &str = "segments.json";

/// Segment archive: the record header plus `r_index`, `count` and per-segment
/// RR intervals, followed by `count × n` little-endian f32 samples.
pub fn write_segments(segments: &[Segment], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = segments
        .first()
        .ok_or_else(|| Error::InvalidRecord("segment archive needs at least one segment".into()))?;
    let n = first.len();
    if segments
        .iter()
        .any(|s| s.len() != n || s.subject_id != first.subject_id || s.state != first.state || s.fs_hz != first.fs_hz)
    {
        return Err(Error::InvalidRecord("archive segments must share subject, state, rate and length".into()));
    }
    let header = json!({
        "subject": first.subject_id,
        "state": first.state.as_str(),
        "fs": fs_json(first.fs_hz),
        "n": n,
        "lead": "II",
        "r_index": first.r_index,
        "count": segments.len(),
        "rr": segments.iter().map(|s| s.rr_interval_s).collect::<Vec<_>>(),
    });
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    for s in segments {
        let f: Vec<f32> = s.samples.iter().map(|&v| v as f32).collect();
        bytes.extend(encode_f32le(&f));
    }
    write_bytes(path, &bytes)
}

pub fn read_segments(path: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (h, payload) = split_header(path, &bytes)?;
    let subject = header_str(path, &h, "subject")?;
    let state = header_state(path, &h)?;
    let fs = header_f64(path, &h, "fs")?;
    let n = header_usize(path, &h, "n")?;
    let r_index = header_usize(path, &h, "r_index")?;
    let count = header_usize(path, &h, "count")?;
    let rr: Vec<Option<f64>> = match h.get("rr") {
        Some(Value::Array(v)) => v.iter().map(Value::as_f64).collect(),
        _ => vec![None; count],
    };
    if payload.len() != count * n * 4 || rr.len() != count {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            declared: count * n,
            found: payload.len() / 4,
        });
    }
    let values = decode_f32le(&payload);
    Ok(values
        .chunks_exact(n.max(1))
        .zip(rr)
        .map(|(chunk, rr)| Segment {
            samples: chunk.iter().map(|&v| v as f64).collect(),
            subject_id: subject.clone(),
            state,
            r_index,
            fs_hz: fs,
            rr_interval_s: rr,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentIndexEntry {
    pub path: PathBuf,
    pub subject: String,
    pub state: crate::State,
    pub count: usize,
}

/// Writes one archive per (subject, state) group plus `segments.json`.
pub fn write_segment_dir(segments: &[Segment], dir: impl AsRef<Path>) -> Result<Vec<SegmentIndexEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut groups: std::collections::BTreeMap<(String, crate::State), Vec<Segment>> = Default::default();
    for s in segments {
        groups.entry((s.subject_id.clone(), s.state)).or_default().push(s.clone());
    }
    let mut index = Vec::new();
    for ((subject, state), segs) in groups {
        let file = format!("{subject}_{state}.seg");
        write_segments(&segs, dir.join(&file))?;
        index.push(SegmentIndexEntry {
            path: file.into(),
            subject,
            state,
            count: segs.len(),
        });
    }
    let path = dir.join(SEGMENT_INDEX_FILE);
    write_bytes(&path, &serde_json::to_vec_pretty(&index).expect("index serializes"))?;
    Ok(index)
}

pub fn read_segment_dir(dir: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let dir = dir.as_ref();
    let path = dir.join(SEGMENT_INDEX_FILE);
    let index: Vec<SegmentIndexEntry> =
        serde_json::from_slice(&read_bytes(&path)?).map_err(|e| Error::MalformedHeader {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    let mut out = Vec::new();
    for e in index {
        out.extend(read_segments(dir.join(&e.path))?);
    }
    Ok(out)
}

/// Loads segments from either a preprocessed directory (`segments.json`) or
/// a raw dataset directory (`manifest.json`), preprocessing the latter.
pub fn load_segments(dir: impl AsRef<Path>, cfg: &PreprocessConfig) -> Result<(Vec<Segment>, Option<QualityReport>)> {
    let dir = dir.as_ref();
    if dir.join(SEGMENT_INDEX_FILE).exists() {
        Ok((read_segment_dir(dir)?, None))
    } else {
        let (s, r) = preprocess_dataset(dir, cfg)?;
        Ok((s, Some(r)))
    }
}
