//! Adam, the plateau learning-rate schedule, P×K batch sampling and the fit loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, ParamStore, Real, Tape, Tensor};
use crate::data_io::write_bytes;
use crate::error::{Error, Result};
use crate::evaluate::argmax;
use crate::losses::{total_loss_on_tape_groups, LossConfig};
use crate::model::Model;
use crate::preprocess::Segment;

pub const HISTORY_CSV: &str = "history.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Smallest decrease of the monitored loss that counts as progress.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 10,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            classes_per_batch: 8,
            samples_per_class: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub plateau: PlateauConfig,
    pub adam: AdamConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            batch_size: 32,
            epochs: 200,
            seed: 42,
            plateau: PlateauConfig::default(),
            adam: AdamConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be positive".into());
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be positive".into());
        }
        let s = self.sampler;
        if s.classes_per_batch == 0 || s.samples_per_class == 0 {
            errs.push("train.sampler: classes_per_batch and samples_per_class must be positive".into());
        }
        if s.classes_per_batch * s.samples_per_class != self.batch_size {
            errs.push(format!(
                "train.sampler: classes_per_batch x samples_per_class = {} x {} must equal batch_size {}",
                s.classes_per_batch, s.samples_per_class, self.batch_size
            ));
        }
        let p = self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) {
            errs.push(format!("train.plateau.factor must lie in (0,1), got {}", p.factor));
        }
        if !(p.min_lr >= 0.0) || !(p.threshold >= 0.0) {
            errs.push("train.plateau: min_lr and threshold must be non-negative".into());
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            errs.push("train.adam: betas must lie in [0,1) and eps must be positive".into());
        }
        errs
    }
}

/// Adam moments, step counter and plateau bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl OptimState {
    pub fn new<T: Real>(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || params.values().iter().map(|v| vec![0.0; v.len()]).collect::<Vec<_>>();
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
///
/// Every gradient is checked first, so a non-finite value leaves parameters
/// and moments untouched.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut OptimState, cfg: &AdamConfig) -> Result<()> {
    for i in 0..params.len() {
        if params.grad(i).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(i).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (values, grads) = params.values_and_grads_mut();
    for (((p, g), m), v) in values.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.to_f64().unwrap_or(f64::NAN);
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let step = state.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            *x = T::lit(x.to_f64().unwrap_or(f64::NAN) - step);
        }
    }
    Ok(())
}

/// Feeds one epoch's monitored loss to the plateau schedule; returns the new rate.
pub fn plateau_update(state: &mut OptimState, val_loss: f64, cfg: &PlateauConfig) -> f64 {
    if val_loss < state.best - cfg.threshold {
        state.best = val_loss;
        state.bad_epochs = 0;
    } else {
        state.bad_epochs += 1;
        if state.bad_epochs >= cfg.patience {
            state.lr = (state.lr * cfg.factor).max(cfg.min_lr);
            state.bad_epochs = 0;
        }
    }
    state.lr
}

/// Indices of `p` distinct classes with `k` items each.
///
/// Classes holding at least `k` items contribute distinct items; smaller
/// classes are sampled with replacement.
pub fn balanced_batch<R: Rng>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < p {
        return Err(Error::TooFewClasses {
            available: by_class.len(),
            needed: p,
        });
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let chosen: Vec<usize> = classes.choose_multiple(rng, p).copied().collect();
    let mut batch = Vec::with_capacity(p * k);
    for c in chosen {
        let pool = &by_class[&c];
        if pool.len() >= k {
            batch.extend(pool.choose_multiple(rng, k).copied());
        } else {
            batch.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }
    Ok(batch)
}

/// Sorted subject names and the class index of each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub subjects: Vec<String>,
}

impl LabelMap {
    pub fn from_segments(segments: &[Segment]) -> Self {
        let mut subjects: Vec<String> = segments.iter().map(|s| s.subject_id.clone()).collect();
        subjects.sort();
        subjects.dedup();
        LabelMap { subjects }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn index(&self, subject: &str) -> Option<usize> {
        self.subjects.binary_search_by(|s| s.as_str().cmp(subject)).ok()
    }

    pub fn labels(&self, segments: &[Segment]) -> Result<Vec<usize>> {
        segments
            .iter()
            .map(|s| {
                self.index(&s.subject_id)
                    .ok_or_else(|| Error::InsufficientData(format!("subject {} is not among the training classes", s.subject_id)))
            })
            .collect()
    }
}

/// Stacks equal-length segments into a `[B,1,L]` tensor.
pub fn stack<T: Real>(segments: &[&Segment]) -> Result<Tensor<T>> {
    let l = segments.first().map_or(0, |s| s.len());
    if segments.iter().any(|s| s.len() != l) {
        return Err(Error::ShapeMismatch("segments in one tensor must share a length".into()));
    }
    let data = segments.iter().flat_map(|s| s.samples.iter().map(|&v| T::lit(v))).collect();
    Tensor::new(&[segments.len(), 1, l], data)
}

/// Positions of `batch` grouped by segment length, longest first.
fn length_groups(segments: &[Segment], batch: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<std::cmp::Reverse<usize>, Vec<usize>> = BTreeMap::new();
    for &i in batch {
        groups.entry(std::cmp::Reverse(segments[i].len())).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Loss (and, in training, gradients in `model.params`) of one batch.
fn batch_pass<T: Real>(
    model: &mut Model<T>,
    segments: &[Segment],
    labels: &[usize],
    batch: &[usize],
    loss_cfg: &LossConfig,
    train: bool,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let params = if train {
        model.params.bind(&mut tape)
    } else {
        model.params.values().iter().map(|v| tape.constant(v.clone())).collect()
    };
    let mut bn = if train { std::mem::take(&mut model.bn) } else { model.bn.clone() };
    let mode = if train { BnMode::Train } else { BnMode::Eval };
    let mut outs = Vec::new();
    let mut order = Vec::new();
    let mut result = Ok(());
    for group in length_groups(segments, batch) {
        let refs: Vec<&Segment> = group.iter().map(|&i| &segments[i]).collect();
        let x = match stack::<T>(&refs) {
            Ok(x) => tape.constant(x),
            Err(e) => {
                result = Err(e);
                break;
            }
        };
        match model.forward_bound(&mut tape, &params, &mut bn, x, mode) {
            Ok(f) => outs.push((f.logits, f.embedding)),
            Err(e) => {
                result = Err(e);
                break;
            }
        }
        order.extend(group);
    }
    if train {
        model.bn = bn;
    }
    result?;
    let y: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let correct = outs
        .iter()
        .flat_map(|&(lv, _)| {
            let c = tape.shape(lv)[1];
            tape.value(lv).data().chunks(c).map(argmax).collect::<Vec<_>>()
        })
        .zip(&y)
        .filter(|(p, t)| p == *t)
        .count();
    let (root, loss) = total_loss_on_tape_groups(&mut tape, &outs, &y, loss_cfg)?;
    if train {
        tape.backward(root)?;
        model.params.zero_grad();
        model.params.accumulate(&tape, &params);
    }
    Ok((loss.value, correct))
}

/// One row of `history.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub labels: LabelMap,
}

/// Validation batches, drawn once so every epoch is scored on the same ones.
fn fixed_batches(labels: &[usize], n_batches: usize, p: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let classes = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_batches).map(|_| balanced_batch(labels, p.min(classes), k, &mut rng)).collect()
}

/// Trains `model` in place and leaves it holding the best-validation weights.
///
/// With `out` set, `history.csv` is rewritten after every epoch and the best
/// model (`model.json` plus checkpoint) is saved whenever validation improves.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    train: &[Segment],
    val: &[Segment],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out: Option<&Path>,
) -> Result<FitResult> {
    let mut errs = cfg.validate();
    errs.extend(loss_cfg.validate());
    if !errs.is_empty() {
        return Err(Error::ConfigError(errs));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("training and validation sets must be non-empty".into()));
    }
    let labels = LabelMap::from_segments(train);
    if labels.len() != model.config.n_subjects {
        return Err(Error::ShapeMismatch(format!(
            "model has {} outputs but the training set holds {} subjects",
            model.config.n_subjects,
            labels.len()
        )));
    }
    let y_train = labels.labels(train)?;
    let y_val = labels.labels(val)?;
    let (p, k) = (cfg.sampler.classes_per_batch, cfg.sampler.samples_per_class);
    let n_batches = train.len().div_ceil(cfg.batch_size);
    let val_batches = fixed_batches(&y_val, val.len().div_ceil(cfg.batch_size), p, k, cfg.seed ^ 0x5EED)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimState::new(&model.params, cfg.lr);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<T>, Vec<_>)> = None;
    let mut val_order: Vec<usize> = (0..val.len()).collect();
    val_order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xACC));

    for epoch in 1..=cfg.epochs {
        let lr = state.lr;
        let mut train_loss = 0.0;
        for _ in 0..n_batches {
            let batch = balanced_batch(&y_train, p, k, &mut rng)?;
            let (l, _) = batch_pass(model, train, &y_train, &batch, loss_cfg, true)?;
            adam_step(&mut model.params, &mut state, &cfg.adam)?;
            train_loss += l;
        }
        train_loss /= n_batches as f64;

        let mut val_loss = 0.0;
        for b in &val_batches {
            val_loss += batch_pass(model, val, &y_val, b, loss_cfg, false)?.0;
        }
        val_loss /= val_batches.len() as f64;
        let mut correct = 0;
        for chunk in val_order.chunks(cfg.batch_size) {
            correct += batch_pass(model, val, &y_val, chunk, loss_cfg, false)?.1;
        }
        let val_acc = correct as f64 / val.len() as f64;

        if !val_loss.is_finite() {
            return Err(Error::NonFiniteGradient(format!("validation loss diverged at epoch {epoch}")));
        }
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, model.params.clone(), model.bn.clone()));
            if let Some(dir) = out {
                let meta = serde_json::json!({ "epoch": epoch, "val_loss": val_loss, "val_acc": val_acc, "subjects": labels.subjects });
                model.save(dir, meta)?;
            }
        }
        plateau_update(&mut state, val_loss, &cfg.plateau);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
        });
        if let Some(dir) = out {
            write_bytes(&dir.join(HISTORY_CSV), history_csv(&history).as_bytes())?;
        }
    }
    let (best_epoch, best_val_loss, params, bn) = best.expect("at least one epoch ran");
    model.params = params;
    model.bn = bn;
    Ok(FitResult {
        history,
        best_epoch,
        best_val_loss,
        labels,
    })
}
