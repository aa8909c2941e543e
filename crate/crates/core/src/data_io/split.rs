//! Subject-aware train/validation/test partitioning for the five
//! train-test modes, and minority-class augmentation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::record::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::preprocess::Segment;
use crate::State;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Rest2Rest,
    Exercise2Exercise,
    Mix2Mix,
    Rest2Exercise,
    Exercise2Rest,
}

impl SplitMode {
    pub const ALL: [SplitMode; 5] = [
        SplitMode::Rest2Rest,
        SplitMode::Exercise2Exercise,
        SplitMode::Mix2Mix,
        SplitMode::Rest2Exercise,
        SplitMode::Exercise2Rest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Rest2Rest => "rest2rest",
            SplitMode::Exercise2Exercise => "exercise2exercise",
            SplitMode::Mix2Mix => "mix2mix",
            SplitMode::Rest2Exercise => "rest2exercise",
            SplitMode::Exercise2Rest => "exercise2rest",
        }
    }

    /// States whose data every subject must have under this mode.
    pub fn required_states(self) -> &'static [State] {
        match self {
            SplitMode::Rest2Rest => &[State::Rest],
            SplitMode::Exercise2Exercise => &[State::Exercise],
            _ => &[State::Rest, State::Exercise],
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        SplitMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            val_fraction: 0.2,
            seed: 42,
            mode: SplitMode::Rest2Rest,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            errs.push(format!("split.train_fraction must be in (0,1), got {}", self.train_fraction));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            errs.push(format!("split.val_fraction must be in (0,1), got {}", self.val_fraction));
        }
        if self.train_fraction + self.val_fraction > 1.0 + 1e-12 {
            errs.push("split.train_fraction + split.val_fraction must not exceed 1".into());
        }
        errs
    }
}

/// Anything that can be routed by subject and state.
pub trait Labeled {
    fn subject(&self) -> &str;
    fn state(&self) -> State;
}

impl Labeled for ManifestEntry {
    fn subject(&self) -> &str {
        &self.subject
    }
    fn state(&self) -> State {
        self.state
    }
}

impl Labeled for Segment {
    fn subject(&self) -> &str {
        &self.subject_id
    }
    fn state(&self) -> State {
        self.state
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    /// Stable digest of the index assignment, for controlled-experiment checks.
    pub fn digest_with(&self, key: impl Fn(&T) -> String) -> String {
        let mut h = Sha256::new();
        for (tag, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            h.update(tag.as_bytes());
            for item in part {
                h.update(key(item).as_bytes());
                h.update([0u8]);
            }
        }
        hex::encode(h.finalize())
    }
}

fn group_rng(seed: u64, subject: &str, state: State) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(subject.as_bytes());
    h.update(state.as_str().as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Splits `n` items into (train, val, rest) counts.
fn counts(n: usize, spec: &SplitSpec) -> (usize, usize) {
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(usize::from(n > 0), n);
    let n_val = ((spec.val_fraction * n as f64).round() as usize).min(n - n_train);
    (n_train, n_val)
}

/// Partitions labeled items according to `spec`.
///
/// Same-state modes split each subject's items by the train/val fractions;
/// whatever remains becomes the test set, and when nothing remains the
/// validation items double as test items. Cross-state modes train/validate on
/// the source state and test on every item of the target state. `Mix2Mix`
/// takes the same number of rest and exercise items per subject into each part.
pub fn partition_items<T: Labeled + Clone>(items: &[T], spec: &SplitSpec) -> Result<Split<T>> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::ConfigError(errs));
    }
    if items.is_empty() {
        return Err(Error::InsufficientData("nothing to partition".into()));
    }
    let mut groups: BTreeMap<(String, State), Vec<usize>> = BTreeMap::new();
    let mut subjects = BTreeSet::new();
    for (i, it) in items.iter().enumerate() {
        subjects.insert(it.subject().to_string());
        groups.entry((it.subject().to_string(), it.state())).or_default().push(i);
    }
    for subject in &subjects {
        for &state in spec.mode.required_states() {
            if !groups.contains_key(&(subject.clone(), state)) {
                return Err(Error::MissingState {
                    subject: subject.clone(),
                    state: state.to_string(),
                });
            }
        }
    }

    let shuffled = |subject: &str, state: State| -> Vec<usize> {
        let mut idx = groups[&(subject.to_string(), state)].clone();
        idx.shuffle(&mut group_rng(spec.seed, subject, state));
        idx
    };

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for subject in &subjects {
        match spec.mode {
            SplitMode::Rest2Rest | SplitMode::Exercise2Exercise => {
                let state = spec.mode.required_states()[0];
                let idx = shuffled(subject, state);
                let (nt, nv) = counts(idx.len(), spec);
                train.extend_from_slice(&idx[..nt]);
                val.extend_from_slice(&idx[nt..nt + nv]);
                if nt + nv < idx.len() {
                    test.extend_from_slice(&idx[nt + nv..]);
                } else {
                    test.extend_from_slice(&idx[nt..nt + nv]);
                }
            }
            SplitMode::Rest2Exercise | SplitMode::Exercise2Rest => {
                let (src, dst) = if spec.mode == SplitMode::Rest2Exercise {
                    (State::Rest, State::Exercise)
                } else {
                    (State::Exercise, State::Rest)
                };
                let idx = shuffled(subject, src);
                let (nt, nv) = counts(idx.len(), spec);
                train.extend_from_slice(&idx[..nt]);
                val.extend_from_slice(&idx[nt..nt + nv]);
                test.extend(groups[&(subject.clone(), dst)].iter().copied());
            }
            SplitMode::Mix2Mix => {
                let rest = shuffled(subject, State::Rest);
                let ex = shuffled(subject, State::Exercise);
                let m = rest.len().min(ex.len());
                let (nt, nv) = counts(m, spec);
                for idx in [&rest, &ex] {
                    train.extend_from_slice(&idx[..nt]);
                    val.extend_from_slice(&idx[nt..nt + nv]);
                    if nt + nv < idx.len() {
                        test.extend_from_slice(&idx[nt + nv..]);
                    } else {
                        test.extend_from_slice(&idx[nt..nt + nv]);
                    }
                }
            }
        }
    }
    // keep original item order inside each part
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok(Split {
        train: pick(&train),
        val: pick(&val),
        test: pick(&test),
    })
}

/// Record-level partition of a dataset manifest.
pub fn partition(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split<ManifestEntry>> {
    partition_items(&manifest.records, spec)
}

/// Shift applied to an augmented copy (samples; positive = delayed) and its gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentTransform {
    pub shift: isize,
    pub scale: f64,
}

/// Shifts `x` by `shift` samples with zero fill and scales it.
pub fn apply_transform(x: &[f64], t: AugmentTransform) -> Vec<f64> {
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            let src = i - t.shift;
            if (0..n).contains(&src) {
                x[src as usize] * t.scale
            } else {
                0.0
            }
        })
        .collect()
}

/// Tops every class up to `target_per_class` with shifted, rescaled copies.
///
/// Originals are returned first and unchanged; augmented copies follow in
/// class order. Shifts are uniform within ±5% of the segment length and gains
/// uniform in [0.9, 1.1].
pub fn augment_minority(segments: &[Segment], target_per_class: usize, seed: u64) -> Result<Vec<Segment>> {
    Ok(augment_minority_traced(segments, target_per_class, seed)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// Like [`augment_minority`] but also reports the transform used for each
/// output (`None` for originals) together with the source index.
pub fn augment_minority_traced(
    segments: &[Segment],
    target_per_class: usize,
    seed: u64,
) -> Result<Vec<(Segment, Option<(usize, AugmentTransform)>)>> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_class.entry(s.subject_id.as_str()).or_default().push(i);
    }
    if let Some((class, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::EmptyClass(class.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(Segment, Option<(usize, AugmentTransform)>)> =
        segments.iter().cloned().map(|s| (s, None)).collect();
    for members in by_class.values() {
        for k in members.len()..target_per_class {
            let src_idx = members[k % members.len()];
            let src = &segments[src_idx];
            let max_shift = (0.05 * src.samples.len() as f64).floor() as isize;
            let t = AugmentTransform {
                shift: rng.random_range(-(max_shift as i64)..=max_shift as i64) as isize,
                scale: rng.random_range(0.9..=1.1),
            };
            let mut copy = src.clone();
            copy.samples = apply_transform(&src.samples, t);
            out.push((copy, Some((src_idx, t))));
        }
    }
    Ok(out)
}

/// Convenience: class sizes keyed by subject id.
pub fn class_counts<T: Labeled>(items: &[T]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for it in items {
        *m.entry(it.subject().to_string()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn manifest(subjects: usize, rest: usize, ex: usize) -> DatasetManifest {
        let mut m = DatasetManifest::default();
        for s in 0..subjects {
            for (state, count) in [(State::Rest, rest), (State::Exercise, ex)] {
                for k in 0..count {
                    m.records.push(ManifestEntry {
                        path: PathBuf::from(format!("s{s}_{state}_{k}.ecg")),
                        subject: format!("s{s:02}"),
                        state,
                        duration_s: 60.0,
                    });
                }
            }
        }
        m
    }

    fn spec(mode: SplitMode) -> SplitSpec {
        SplitSpec {
            mode,
            ..SplitSpec::default()
        }
    }

    #[test]
    fn rest2exercise_45_subjects() {
        let m = manifest(45, 4, 3);
        let split = partition(&m, &spec(SplitMode::Rest2Exercise)).unwrap();
        assert!(split.test.iter().all(|r| r.state == State::Exercise));
        assert!(split.train.iter().all(|r| r.state == State::Rest));
        assert_eq!(class_counts(&split.train).len(), 45);
        assert_eq!(class_counts(&split.test).len(), 45);
        assert_eq!(split.test.len(), 45 * 3);
    }

    #[test]
    fn rest2rest_80_20() {
        let m = manifest(3, 10, 0);
        let split = partition(&m, &spec(SplitMode::Rest2Rest)).unwrap();
        for (_, c) in class_counts(&split.train) {
            assert_eq!(c, 8);
        }
        for (_, c) in class_counts(&split.val) {
            assert_eq!(c, 2);
        }
    }

    #[test]
    fn missing_exercise_is_error() {
        let mut m = manifest(3, 5, 5);
        m.records.retain(|r| !(r.subject == "s01" && r.state == State::Exercise));
        match partition(&m, &spec(SplitMode::Rest2Exercise)) {
            Err(Error::MissingState { subject, state }) => {
                assert_eq!(subject, "s01");
                assert_eq!(state, "exercise");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mix2mix_is_balanced() {
        let m = manifest(4, 10, 6);
        let split = partition(&m, &spec(SplitMode::Mix2Mix)).unwrap();
        let rest = split.train.iter().filter(|r| r.state == State::Rest).count();
        let ex = split.train.iter().filter(|r| r.state == State::Exercise).count();
        assert_eq!(rest, ex);
        assert!(split.test.iter().any(|r| r.state == State::Rest));
        assert!(split.test.iter().any(|r| r.state == State::Exercise));
    }

    #[test]
    fn deterministic_and_disjoint_all_modes() {
        let m = manifest(6, 7, 5);
        for mode in SplitMode::ALL {
            let s = SplitSpec {
                train_fraction: 0.6,
                val_fraction: 0.2,
                seed: 7,
                mode,
            };
            let a = partition(&m, &s).unwrap();
            let b = partition(&m, &s).unwrap();
            assert_eq!(a, b);
            let train: BTreeSet<_> = a.train.iter().map(|r| r.path.clone()).collect();
            assert!(a.test.iter().all(|r| !train.contains(&r.path)), "{mode}");
            assert_eq!(class_counts(&a.train).keys().collect::<Vec<_>>(), class_counts(&a.test).keys().collect::<Vec<_>>());
        }
    }

    fn seg(subject: &str, n: usize, phase: f64) -> Segment {
        let mut rng = ChaCha8Rng::seed_from_u64(phase.to_bits());
        let samples = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Segment {
            samples,
            subject_id: subject.to_string(),
            state: State::Rest,
            r_index: n / 4,
            fs_hz: 100.0,
            rr_interval_s: None,
        }
    }

    #[test]
    fn augmentation_counts() {
        let mut segs: Vec<Segment> = (0..3).map(|k| seg("a", 200, k as f64)).collect();
        segs.extend((0..6).map(|k| seg("b", 200, k as f64)));
        let out = augment_minority(&segs, 6, 1).unwrap();
        let counts = class_counts(&out);
        assert_eq!(counts["a"], 6);
        assert_eq!(counts["b"], 6);
        assert_eq!(&out[..segs.len()], &segs[..]);
        let unchanged = augment_minority(&segs[3..], 6, 1).unwrap();
        assert_eq!(unchanged, segs[3..].to_vec());
    }

    #[test]
    fn augmented_shift_matches_cross_correlation_peak() {
        let segs = vec![seg("a", 400, 0.0), seg("b", 400, 1.0), seg("b", 400, 2.0)];
        let out = augment_minority_traced(&segs, 4, 11).unwrap();
        for (copy, trace) in &out {
            let Some((src, t)) = trace else { continue };
            let x = &segs[*src].samples;
            let y = &copy.samples;
            let max_lag = 20isize;
            let xc = |lag: isize| -> f64 {
                (0..x.len() as isize)
                    .filter_map(|i| {
                        let j = i + lag;
                        (0..y.len() as isize).contains(&j).then(|| x[i as usize] * y[j as usize])
                    })
                    .sum()
            };
            let best = (-max_lag..=max_lag).max_by(|&a, &b| xc(a).total_cmp(&xc(b))).unwrap();
            assert_eq!(best, t.shift);
            assert_eq!(copy.subject_id, segs[*src].subject_id);
        }
    }
}
