use serde::{Deserialize, Serialize};

use crate::State;

/// Fixed-length window anchored on an R peak at 25% of its length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub samples: Vec<f64>,
    pub subject_id: String,
    pub state: State,
    pub r_index: usize,
    pub fs_hz: f64,
    /// RR interval around the anchoring beat (seconds), when a neighbour was detected.
    pub rr_interval_s: Option<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Window length for a state at a sampling rate: round(6·fs) rest, round(4·fs) exercise.
pub fn segment_length(state: State, fs_hz: f64) -> usize {
    (state.segment_seconds() * fs_hz).round() as usize
}

/// Offset of the R peak inside a window of length `len`.
pub fn r_offset(len: usize) -> usize {
    (0.25 * len as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
    /// Peaks whose window ran past either end of the record.
    pub truncated: usize,
}

pub fn segment_around_peaks(x: &[f64], peaks: &[usize], state: State, fs_hz: f64, subject: &str) -> Segmentation {
    let len = segment_length(state, fs_hz);
    let r_index = r_offset(len);
    let mut segments = Vec::new();
    let mut truncated = 0;
    for (k, &p) in peaks.iter().enumerate() {
        if p < r_index || p - r_index + len > x.len() {
            truncated += 1;
            continue;
        }
        let start = p - r_index;
        let rr = if k > 0 {
            Some(p - peaks[k - 1])
        } else if peaks.len() > 1 {
            Some(peaks[1] - p)
        } else {
            None
        };
        segments.push(Segment {
            samples: x[start..start + len].to_vec(),
            subject_id: subject.to_string(),
            state,
            r_index,
            fs_hz,
            rr_interval_s: rr.map(|v| v as f64 / fs_hz),
        });
    }
    Segmentation { segments, truncated }
}
