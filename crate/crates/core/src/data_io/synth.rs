//! Synthetic ECG subjects.
//!
//! Each beat is the sum of five Gaussian bumps (P, Q, R, S, T) centred
//! relative to the R time. A subject's identity is the set of bump
//! amplitudes, widths and offsets; the physiological state only changes the
//! heart rate and, for exercise, narrows every wave.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::record::{write_record, DatasetManifest, EcgRecord, ManifestEntry};
use crate::error::{Error, Result};
use crate::State;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub width_s: f64,
    /// Centre relative to the R peak, seconds.
    pub offset_s: f64,
}

impl Wave {
    const fn new(amplitude: f64, width_s: f64, offset_s: f64) -> Self {
        Wave {
            amplitude,
            width_s,
            offset_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub p: Wave,
    pub q: Wave,
    pub r: Wave,
    pub s: Wave,
    pub t: Wave,
    pub rest_hr_bpm: f64,
    pub exercise_hr_bpm: f64,
    pub morphology_seed: u64,
}

impl Default for SubjectParams {
    fn default() -> Self {
        SubjectParams {
            p: Wave::new(0.15, 0.025, -0.20),
            q: Wave::new(-0.12, 0.010, -0.030),
            r: Wave::new(1.00, 0.012, 0.0),
            s: Wave::new(-0.25, 0.012, 0.030),
            t: Wave::new(0.30, 0.050, 0.30),
            rest_hr_bpm: 70.0,
            exercise_hr_bpm: 120.0,
            morphology_seed: 0,
        }
    }
}

impl SubjectParams {
    /// Draws a subject morphology; different seeds give distinguishable identities.
    pub fn random(morphology_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(morphology_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        SubjectParams {
            p: Wave::new(u(0.06, 0.25), u(0.018, 0.035), u(-0.23, -0.15)),
            q: Wave::new(u(-0.25, -0.04), u(0.007, 0.014), u(-0.036, -0.020)),
            r: Wave::new(u(0.8, 1.5), u(0.009, 0.016), 0.0),
            s: Wave::new(u(-0.5, -0.08), u(0.008, 0.016), u(0.020, 0.036)),
            t: Wave::new(u(0.12, 0.5), u(0.035, 0.070), u(0.24, 0.36)),
            rest_hr_bpm: u(62.0, 78.0),
            exercise_hr_bpm: u(100.0, 140.0),
            morphology_seed,
        }
    }

    pub fn waves(&self) -> [Wave; 5] {
        [self.p, self.q, self.r, self.s, self.t]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in ["P", "Q", "R", "S", "T"].iter().zip(self.waves()) {
            if !(w.width_s > 0.0) {
                return Err(Error::InvalidParams(format!("{name} width must be positive, got {}", w.width_s)));
            }
        }
        if !(self.r.amplitude > self.q.amplitude.abs() && self.r.amplitude > self.s.amplitude.abs()) {
            return Err(Error::InvalidParams("R amplitude must dominate |Q| and |S|".into()));
        }
        if !(self.rest_hr_bpm > 0.0 && self.exercise_hr_bpm > 0.0) {
            return Err(Error::InvalidParams("heart rates must be positive".into()));
        }
        Ok(())
    }
}

/// Output of [`synth_ecg`]: the record and its ground-truth R-peak sample indices.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub record: EcgRecord,
    pub r_peaks: Vec<usize>,
}

/// Per-beat heart-rate jitter, as a fraction of the base rate.
const HR_JITTER: f64 = 0.03;

pub fn synth_ecg(
    params: &SubjectParams,
    state: State,
    duration_s: f64,
    noise_std: f64,
    seed: u64,
    fs_hz: f64,
) -> Result<SynthOutput> {
    params.validate()?;
    if !(duration_s > 0.0) {
        return Err(Error::InvalidParams(format!("duration must be positive, got {duration_s}")));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidParams(format!("noise_std must be non-negative, got {noise_std}")));
    }
    if !(fs_hz > 0.0) {
        return Err(Error::InvalidParams(format!("sampling rate must be positive, got {fs_hz}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * fs_hz).round() as usize;
    let (hr_lo, hr_hi) = state.hr_band();
    let base_hr = match state {
        State::Rest => params.rest_hr_bpm,
        State::Exercise => params.exercise_hr_bpm,
    }
    .clamp(hr_lo, hr_hi);
    // exercise narrows every wave
    let compress = match state {
        State::Rest => 1.0,
        State::Exercise => params.rest_hr_bpm.clamp(State::Rest.hr_band().0, State::Rest.hr_band().1) / base_hr,
    };
    let waves: Vec<Wave> = params
        .waves()
        .iter()
        .map(|w| Wave::new(w.amplitude, w.width_s * compress, w.offset_s))
        .collect();

    let min_rr = (60.0 / hr_hi * fs_hz).ceil() as i64;
    let nominal_rr = 60.0 / base_hr * fs_hz;
    // beats are laid out from just before t=0 to just past the end so edge
    // waves are complete; only R peaks inside the record are reported
    let margin = nominal_rr.ceil() as i64 * 2;
    let mut pos = -((rng.random_range(0.0..1.0) * nominal_rr).round() as i64);
    let mut beats: Vec<f64> = Vec::new();
    let mut peaks = Vec::new();
    while pos < n as i64 + margin {
        beats.push(pos as f64);
        if pos >= 0 && pos < n as i64 {
            peaks.push(pos as usize);
        }
        let hr = (base_hr * (1.0 + rng.random_range(-HR_JITTER..HR_JITTER))).clamp(hr_lo, hr_hi);
        let rr = ((60.0 / hr * fs_hz).round() as i64).max(min_rr);
        pos += rr;
    }

    let mut signal = vec![0.0f64; n];
    for &beat in &beats {
        for w in &waves {
            let centre = beat + w.offset_s * fs_hz;
            let sigma = w.width_s * fs_hz;
            let lo = (centre - 6.0 * sigma).floor().max(0.0) as usize;
            let hi = ((centre + 6.0 * sigma).ceil().max(0.0) as usize).min(n.saturating_sub(1));
            if centre + 6.0 * sigma < 0.0 || lo > hi {
                continue;
            }
            for (i, v) in signal.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let z = (i as f64 - centre) / sigma;
                *v += w.amplitude * (-0.5 * z * z).exp();
            }
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("valid std");
        for v in signal.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let record = EcgRecord::new(
        format!("seed{}", params.morphology_seed),
        state,
        fs_hz,
        signal.iter().map(|&v| v as f32).collect(),
    );
    Ok(SynthOutput { record, r_peaks: peaks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasetSpec {
    pub n_subjects: usize,
    pub rest_s: f64,
    pub exercise_s: f64,
    pub seed: u64,
    pub fs_hz: f64,
    pub noise_std: f64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        SynthDatasetSpec {
            n_subjects: 10,
            rest_s: 120.0,
            exercise_s: 120.0,
            seed: 42,
            fs_hz: 300.0,
            noise_std: 0.05,
        }
    }
}

pub fn subject_name(index: usize) -> String {
    format!("s{:02}", index + 1)
}

/// In-memory synthetic dataset: one rest and one exercise record per subject.
pub fn synth_records(spec: &SynthDatasetSpec) -> Result<Vec<EcgRecord>> {
    let mut out = Vec::with_capacity(spec.n_subjects * 2);
    for i in 0..spec.n_subjects {
        let params = SubjectParams::random(spec.seed.wrapping_mul(1000).wrapping_add(i as u64));
        for (k, (state, dur)) in [(State::Rest, spec.rest_s), (State::Exercise, spec.exercise_s)].into_iter().enumerate() {
            if dur <= 0.0 {
                continue;
            }
            let rec_seed = spec.seed.wrapping_mul(7919).wrapping_add((i * 2 + k) as u64);
            let mut rec = synth_ecg(&params, state, dur, spec.noise_std, rec_seed, spec.fs_hz)?.record;
            rec.subject_id = subject_name(i);
            out.push(rec);
        }
    }
    Ok(out)
}

/// Writes a synthetic dataset directory (`manifest.json` + one `.ecg` per record).
pub fn write_synth_dataset(spec: &SynthDatasetSpec, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = DatasetManifest::default();
    for rec in synth_records(spec)? {
        let file = format!("{}_{}.ecg", rec.subject_id, rec.state);
        write_record(&rec, dir.join(&file))?;
        manifest.records.push(ManifestEntry {
            path: file.into(),
            subject: rec.subject_id.clone(),
            state: rec.state,
            duration_s: rec.duration_s(),
        });
    }
    manifest.save(dir)?;
    Ok(manifest)
}
