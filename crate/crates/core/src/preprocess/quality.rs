//! Segment quality gating: clipping, QRS-band power ratio, plausible RR.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::segment::Segment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    /// Consecutive samples pinned at the extremum that count as clipping.
    pub clip_run: usize,
    pub qrs_band_hz: (f64, f64),
    pub min_qrs_power_ratio: f64,
    pub rr_bpm: (f64, f64),
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            clip_run: 5,
            qrs_band_hz: (5.0, 15.0),
            min_qrs_power_ratio: 0.05,
            rr_bpm: (40.0, 220.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    Clipped,
    LowSnr,
    BadRr,
    BoundaryTruncated,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityReport {
    pub n_input: usize,
    pub n_passed: usize,
    pub clipped: usize,
    pub low_snr: usize,
    pub bad_rr: usize,
    pub boundary_truncated: usize,
}

impl QualityReport {
    pub fn rejected(&self) -> usize {
        self.clipped + self.low_snr + self.bad_rr + self.boundary_truncated
    }

    pub fn is_consistent(&self) -> bool {
        self.n_passed + self.rejected() == self.n_input
    }

    pub fn merge(&mut self, other: &QualityReport) {
        self.n_input += other.n_input;
        self.n_passed += other.n_passed;
        self.clipped += other.clipped;
        self.low_snr += other.low_snr;
        self.bad_rr += other.bad_rr;
        self.boundary_truncated += other.boundary_truncated;
    }

    fn count(&mut self, r: Rejection) {
        match r {
            Rejection::Clipped => self.clipped += 1,
            Rejection::LowSnr => self.low_snr += 1,
            Rejection::BadRr => self.bad_rr += 1,
            Rejection::BoundaryTruncated => self.boundary_truncated += 1,
        }
    }
}

fn longest_run_at(x: &[f64], level: f64) -> usize {
    let (mut best, mut run) = (0, 0);
    for &v in x {
        if v == level {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

/// True when `x` sits at `max` or `min` for `run` consecutive samples.
pub fn is_clipped(x: &[f64], max: f64, min: f64, run: usize) -> bool {
    longest_run_at(x, max) >= run || longest_run_at(x, min) >= run
}

/// Fraction of (non-DC, one-sided) spectral power inside `band_hz`.
pub fn band_power_ratio(x: &[f64], fs_hz: f64, band_hz: (f64, f64)) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut band, mut total) = (0.0, 0.0);
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1).skip(1) {
        let f = k as f64 * fs_hz / n as f64;
        let p = c.norm_sqr();
        total += p;
        if f >= band_hz.0 && f <= band_hz.1 {
            band += p;
        }
    }
    if total > 0.0 {
        band / total
    } else {
        0.0
    }
}

/// Raw-signal context for the clipping check: the window taken from the
/// unfiltered record, and the record's amplitude extrema.
pub struct RawContext<'a> {
    pub window: &'a [f64],
    pub max: f64,
    pub min: f64,
}

pub fn classify(segment: &Segment, raw: Option<&RawContext<'_>>, cfg: &QualityConfig) -> Option<Rejection> {
    let clipped = match raw {
        Some(r) => is_clipped(r.window, r.max, r.min, cfg.clip_run),
        None => {
            let max = segment.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = segment.samples.iter().cloned().fold(f64::INFINITY, f64::min);
            is_clipped(&segment.samples, max, min, cfg.clip_run)
        }
    };
    if clipped {
        return Some(Rejection::Clipped);
    }
    if band_power_ratio(&segment.samples, segment.fs_hz, cfg.qrs_band_hz) < cfg.min_qrs_power_ratio {
        return Some(Rejection::LowSnr);
    }
    if let Some(rr) = segment.rr_interval_s {
        let bpm = 60.0 / rr;
        if !(bpm >= cfg.rr_bpm.0 && bpm <= cfg.rr_bpm.1) {
            return Some(Rejection::BadRr);
        }
    }
    None
}

pub fn quality_gate(segments: Vec<Segment>, cfg: &QualityConfig) -> (Vec<Segment>, QualityReport) {
    quality_gate_with_raw(segments, None, cfg)
}

pub(crate) fn quality_gate_with_raw(
    segments: Vec<Segment>,
    raw: Option<Vec<RawContext<'_>>>,
    cfg: &QualityConfig,
) -> (Vec<Segment>, QualityReport) {
    let mut report = QualityReport {
        n_input: segments.len(),
        ..QualityReport::default()
    };
    let mut passed = Vec::with_capacity(segments.len());
    for (i, seg) in segments.into_iter().enumerate() {
        let ctx = raw.as_ref().map(|r| &r[i]);
        match classify(&seg, ctx, cfg) {
            Some(r) => report.count(r),
            None => passed.push(seg),
        }
    }
    report.n_passed = passed.len();
    (passed, report)
}
