//! Verification and identification metrics, the scenario runner and the
//! ablation driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive_auth::{
    build_scores, cosine, enroll, identify, threshold_profiles, Gallery, Template, ThresholdProfile, ThresholdWeights, GALLERY_JSON,
};
use crate::autodiff::Real;
use crate::config::RunConfig;
use crate::data_io::{partition_items, write_bytes, Split, SplitMode};
use crate::error::{Error, Result};
use crate::model::{Ablation, Model};
use crate::preprocess::Segment;
use crate::training::{fit, stack, FitResult, LabelMap};

pub const REPORT_JSON: &str = "report.json";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const TABLE_CSV: &str = "table.csv";

const EMBED_CHUNK: usize = 64;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn nonempty(genuine: &[f64], impostor: &[f64]) -> Result<()> {
    if genuine.is_empty() || impostor.is_empty() {
        Err(Error::EmptyScores)
    } else {
        Ok(())
    }
}

/// Counts over pre-sorted lists: impostors at or above `t`, genuines below `t`.
fn counts_at(gen_sorted: &[f64], imp_sorted: &[f64], t: f64) -> (usize, usize) {
    let fa = imp_sorted.len() - imp_sorted.partition_point(|&s| s < t);
    let fr = gen_sorted.partition_point(|&s| s < t);
    (fa, fr)
}

/// `(FAR, FRR)` at `threshold`: impostors scoring `≥ t` and genuines scoring `< t`.
pub fn far_frr(genuine: &[f64], impostor: &[f64], threshold: f64) -> Result<(f64, f64)> {
    nonempty(genuine, impostor)?;
    let fa = impostor.iter().filter(|&&s| s >= threshold).count();
    let fr = genuine.iter().filter(|&&s| s < threshold).count();
    Ok((fa as f64 / impostor.len() as f64, fr as f64 / genuine.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tpr: f64,
}

/// ROC points from the strictest threshold (`+∞`) down to the lowest score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// ROC curve over every distinct score and its trapezoidal area.
pub fn roc_auc(genuine: &[f64], impostor: &[f64]) -> Result<(RocCurve, f64)> {
    nonempty(genuine, impostor)?;
    let (g, i) = (sorted(genuine), sorted(impostor));
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        tpr: 0.0,
    }];
    for t in thresholds {
        let (fa, fr) = counts_at(&g, &i, t);
        points.push(RocPoint {
            threshold: t,
            far: fa as f64 / ni,
            tpr: (g.len() - fr) as f64 / ng,
        });
    }
    let auc = points.windows(2).map(|w| (w[1].far - w[0].far) * (w[1].tpr + w[0].tpr) / 2.0).sum();
    Ok((RocCurve { points }, auc))
}

/// `P(genuine > impostor) + ½·P(tie)` from mid-ranks of the pooled scores.
pub fn mann_whitney_auc(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    nonempty(genuine, impostor)?;
    let mut all: Vec<(f64, bool)> = genuine.iter().map(|&s| (s, true)).chain(impostor.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    Ok((rank_sum - ng * (ng + 1.0) / 2.0) / (ng * ni))
}

/// Equal error rate and its threshold: the score threshold minimising
/// `|FAR − FRR|` (lowest such threshold on ties), with `EER = (FAR+FRR)/2` there.
pub fn eer(genuine: &[f64], impostor: &[f64]) -> Result<(f64, f64)> {
    nonempty(genuine, impostor)?;
    let (g, i) = (sorted(genuine), sorted(impostor));
    let mut candidates: Vec<f64> = g.iter().chain(&i).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(f64::INFINITY);
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for t in candidates {
        let (fa, fr) = counts_at(&g, &i, t);
        let (far, frr) = (fa as f64 / ni, fr as f64 / ng);
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), (far + frr) / 2.0, t);
        }
    }
    Ok((best.1, best.2))
}

/// Probe-versus-template scores with the claimed identity of each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClaimScores {
    /// `(claimed user, score)` for probes of that user.
    pub genuine: Vec<(String, f64)>,
    /// `(claimed user, score)` for probes of other users.
    pub impostor: Vec<(String, f64)>,
}

impl ClaimScores {
    pub fn build(probes: &[Vec<f64>], users: &[String], templates: &[Template]) -> Self {
        let mut out = ClaimScores::default();
        for (p, u) in probes.iter().zip(users) {
            for t in templates {
                let s = cosine(p, &t.vector);
                if &t.user == u {
                    out.genuine.push((t.user.clone(), s));
                } else {
                    out.impostor.push((t.user.clone(), s));
                }
            }
        }
        out
    }

    pub fn genuine_scores(&self) -> Vec<f64> {
        self.genuine.iter().map(|x| x.1).collect()
    }

    pub fn impostor_scores(&self) -> Vec<f64> {
        self.impostor.iter().map(|x| x.1).collect()
    }

    /// Pooled FAR and FRR with each claim judged at its user's threshold.
    pub fn far_frr_at(&self, thresholds: &BTreeMap<String, f64>) -> Result<(f64, f64)> {
        nonempty(&self.genuine_scores(), &self.impostor_scores())?;
        let tau = |u: &String| thresholds.get(u).copied().unwrap_or(f64::INFINITY);
        let fa = self.impostor.iter().filter(|(u, s)| *s >= tau(u)).count();
        let fr = self.genuine.iter().filter(|(u, s)| *s < tau(u)).count();
        Ok((fa as f64 / self.impostor.len() as f64, fr as f64 / self.genuine.len() as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: SplitMode,
    pub ablation: Option<String>,
    pub n_subjects: usize,
    pub n_test: usize,
    /// Nearest-template identification accuracy.
    pub acc_pct: f64,
    /// Classifier-head identification accuracy.
    pub acc_classifier_pct: f64,
    pub far_pct: f64,
    pub frr_pct: f64,
    pub auc_pct: f64,
    pub eer_pct: f64,
    /// Mean of the per-user adaptive thresholds at which FAR and FRR were counted.
    pub threshold_used: f64,
    pub tau_b: f64,
    pub thresholds: BTreeMap<String, f64>,
    pub n_genuine: usize,
    pub n_impostor: usize,
    pub best_epoch: Option<usize>,
    pub config_digest: String,
    pub split_digest: String,
}

/// Eval-mode embeddings and logits of `segments`, in order.
pub fn embed_segments<T: Real>(model: &Model<T>, segments: &[Segment]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut emb = vec![Vec::new(); segments.len()];
    let mut logits = vec![Vec::new(); segments.len()];
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_len.entry(s.len()).or_default().push(i);
    }
    for idx in by_len.values() {
        for chunk in idx.chunks(EMBED_CHUNK) {
            let refs: Vec<&Segment> = chunk.iter().map(|&i| &segments[i]).collect();
            let (e, z) = model.infer(&stack::<T>(&refs)?)?;
            let (de, dz) = (e.shape()[1], z.shape()[1]);
            let (e, z) = (e.to_f64_vec(), z.to_f64_vec());
            for (k, &i) in chunk.iter().enumerate() {
                emb[i] = e[k * de..(k + 1) * de].to_vec();
                logits[i] = z[k * dz..(k + 1) * dz].to_vec();
            }
        }
    }
    Ok((emb, logits))
}

fn subjects(segments: &[Segment]) -> Vec<String> {
    segments.iter().map(|s| s.subject_id.clone()).collect()
}

/// Templates and threshold profiles of a set of users.
#[derive(Debug, Clone)]
pub struct Enrollment {
    pub templates: Vec<Template>,
    pub profiles: Vec<ThresholdProfile>,
    pub tau_b: f64,
}

/// Enrolls one template per user from `embeddings`.
///
/// The baseline threshold is the EER threshold of the `probes` scored against
/// the templates; the threshold factors come from all pairwise scores of
/// `embeddings`.
pub fn enroll_users(
    embeddings: &[Vec<f64>],
    users: &[String],
    probes: &[Vec<f64>],
    probe_users: &[String],
    weights: &ThresholdWeights,
) -> Result<Enrollment> {
    let mut per_user: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (e, u) in embeddings.iter().zip(users) {
        per_user.entry(u).or_default().push(e.clone());
    }
    let templates = per_user.iter().map(|(u, es)| enroll(u, es)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = templates.iter().map(|t| t.user.clone()).collect();
    let probe_scores = ClaimScores::build(probes, probe_users, &templates);
    let (_, tau_b) = eer(&probe_scores.genuine_scores(), &probe_scores.impostor_scores())?;
    let profiles = threshold_profiles(&build_scores(embeddings, users)?, tau_b, &names, weights)?;
    Ok(Enrollment {
        templates,
        profiles,
        tau_b,
    })
}

/// Everything one evaluation produces besides the report.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub gallery: Gallery,
    pub profiles: Vec<ThresholdProfile>,
    pub test_embeddings: Vec<Vec<f64>>,
    pub test_scores: ClaimScores,
}

/// Scores a trained model on a split.
///
/// Templates are enrolled from the training embeddings; the baseline threshold
/// is the EER threshold of validation probes against those templates, and the
/// threshold factors come from all pairwise training scores. Test probes are
/// identified by nearest template and verified against every template.
pub fn evaluate_split<T: Real>(
    model: &Model<T>,
    labels: &LabelMap,
    split: &Split<Segment>,
    cfg: &RunConfig,
    mode: SplitMode,
) -> Result<Evaluation> {
    let (train_e, _) = embed_segments(model, &split.train)?;
    let (val_e, _) = embed_segments(model, &split.val)?;
    let (test_e, test_z) = embed_segments(model, &split.test)?;
    let (train_u, val_u, test_u) = (subjects(&split.train), subjects(&split.val), subjects(&split.test));

    let Enrollment {
        templates,
        profiles,
        tau_b,
    } = enroll_users(&train_e, &train_u, &val_e, &val_u, &cfg.weights)?;
    let users: Vec<String> = templates.iter().map(|t| t.user.clone()).collect();
    let thresholds: BTreeMap<String, f64> = profiles.iter().map(|p| (p.user.clone(), p.tau_p)).collect();

    if split.test.is_empty() {
        return Err(Error::InsufficientData("test set is empty".into()));
    }
    let mut hits = 0;
    let mut clf_hits = 0;
    for ((e, z), u) in test_e.iter().zip(&test_z).zip(&test_u) {
        if identify(e, &templates)?.0.user == *u {
            hits += 1;
        }
        if labels.index(u) == Some(argmax(z)) {
            clf_hits += 1;
        }
    }
    let test_scores = ClaimScores::build(&test_e, &test_u, &templates);
    let (far, frr) = test_scores.far_frr_at(&thresholds)?;
    let (g, i) = (test_scores.genuine_scores(), test_scores.impostor_scores());
    let (_, auc) = roc_auc(&g, &i)?;
    let (eer_v, _) = eer(&g, &i)?;
    let n = split.test.len() as f64;
    let report = MetricsReport {
        scenario: mode,
        ablation: model.config.ablation().map(|a| a.as_str().to_string()),
        n_subjects: users.len(),
        n_test: split.test.len(),
        acc_pct: 100.0 * hits as f64 / n,
        acc_classifier_pct: 100.0 * clf_hits as f64 / n,
        far_pct: 100.0 * far,
        frr_pct: 100.0 * frr,
        auc_pct: 100.0 * auc,
        eer_pct: 100.0 * eer_v,
        threshold_used: thresholds.values().sum::<f64>() / thresholds.len() as f64,
        tau_b,
        thresholds,
        n_genuine: g.len(),
        n_impostor: i.len(),
        best_epoch: None,
        config_digest: cfg.digest(),
        split_digest: split_digest(split),
    };
    Ok(Evaluation {
        report,
        gallery: Gallery::from_parts(&templates, &profiles)?,
        profiles,
        test_embeddings: test_e,
        test_scores,
    })
}

/// Digest of which segments landed in which part.
pub fn split_digest(split: &Split<Segment>) -> String {
    split.digest_with(|s| format!("{}/{}/{}/{}", s.subject_id, s.state, s.r_index, s.samples.first().map_or(0, |v| v.to_bits())))
}

/// One row per segment: subject, state, then the embedding.
pub fn embeddings_csv(segments: &[Segment], embeddings: &[Vec<f64>]) -> String {
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut s = String::from("subject,state");
    for k in 0..dim {
        let _ = write!(s, ",e{k}");
    }
    s.push('\n');
    for (seg, e) in segments.iter().zip(embeddings) {
        let _ = write!(s, "{},{}", seg.subject_id, seg.state);
        for v in e {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    s
}

/// Result of a full train-and-evaluate run.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub evaluation: Evaluation,
    pub fit: FitResult,
    pub model: Model<f32>,
    pub split: Split<Segment>,
}

impl ScenarioOutcome {
    pub fn report(&self) -> &MetricsReport {
        &self.evaluation.report
    }
}

/// Partitions `segments` for `mode`, trains a fresh model and evaluates it.
///
/// With `out` set the run directory receives the resolved config, the
/// checkpoint, `history.csv`, `gallery.json`, `embeddings.csv` and `report.json`.
pub fn run_scenario(cfg: &RunConfig, mode: SplitMode, segments: &[Segment], out: Option<&Path>) -> Result<ScenarioOutcome> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::ConfigError(errs));
    }
    if let Some(dir) = out {
        cfg.claim_run_dir(dir)?;
    }
    let split = partition_items(segments, &cfg.split_spec(mode))?;
    let labels = LabelMap::from_segments(&split.train);
    let model_cfg = crate::model::ModelConfig {
        n_subjects: labels.len(),
        ..cfg.model.clone()
    };
    let mut model = Model::<f32>::new(model_cfg, cfg.train.seed)?;
    let fit_result = fit(&mut model, &split.train, &split.val, &cfg.train, &cfg.loss, out)?;
    let mut evaluation = evaluate_split(&model, &fit_result.labels, &split, cfg, mode)?;
    evaluation.report.best_epoch = Some(fit_result.best_epoch);
    if let Some(dir) = out {
        write_outputs(dir, &split.test, &evaluation)?;
    }
    Ok(ScenarioOutcome {
        evaluation,
        fit: fit_result,
        model,
        split,
    })
}

pub fn write_outputs(dir: &Path, test: &[Segment], ev: &Evaluation) -> Result<()> {
    write_bytes(&dir.join(REPORT_JSON), &serde_json::to_vec_pretty(&ev.report).expect("report serialises"))?;
    write_bytes(&dir.join(EMBEDDINGS_CSV), embeddings_csv(test, &ev.test_embeddings).as_bytes())?;
    ev.gallery.save(&dir.join(GALLERY_JSON))
}

/// Re-evaluates a saved run directory on `segments` without training.
pub fn evaluate_saved(dir: &Path, cfg: &RunConfig, mode: SplitMode, segments: &[Segment]) -> Result<Evaluation> {
    let (model, meta) = Model::<f32>::load(dir)?;
    let split = partition_items(segments, &cfg.split_spec(mode))?;
    let labels = match meta.get("subjects").and_then(|v| serde_json::from_value::<Vec<String>>(v.clone()).ok()) {
        Some(subjects) => LabelMap { subjects },
        None => LabelMap::from_segments(&split.train),
    };
    let mut ev = evaluate_split(&model, &labels, &split, cfg, mode)?;
    ev.report.best_epoch = meta.get("epoch").and_then(|v| v.as_u64()).map(|e| e as usize);
    Ok(ev)
}

/// One row of the ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub report: MetricsReport,
}

pub fn ablation_table_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("ablation,multi_scale,deep_conv,attention,acc_pct,acc_classifier_pct,far_pct,frr_pct,auc_pct,eer_pct,split_digest\n");
    for r in rows {
        let (ms, dc, at) = r.ablation.flags();
        let m = &r.report;
        let _ = writeln!(
            s,
            "{},{ms},{dc},{at},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            r.ablation.as_str(),
            m.acc_pct,
            m.acc_classifier_pct,
            m.far_pct,
            m.frr_pct,
            m.auc_pct,
            m.eer_pct,
            m.split_digest
        );
    }
    s
}

/// Runs the cross-state scenario under each of `ablations` with identical
/// data and seeds; with `out` set each run gets a subdirectory and the
/// comparison is written to `table.csv`.
pub fn run_ablation(cfg: &RunConfig, segments: &[Segment], ablations: &[Ablation], out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &a in ablations {
        let run_cfg = RunConfig {
            model: cfg.model.clone().with_ablation(a),
            ..cfg.clone()
        };
        let sub = out.map(|d| d.join(a.as_str()));
        let outcome = run_scenario(&run_cfg, SplitMode::Rest2Exercise, segments, sub.as_deref())?;
        rows.push(AblationRow {
            ablation: a,
            report: outcome.evaluation.report,
        });
    }
    if let Some(dir) = out {
        write_bytes(&dir.join(TABLE_CSV), ablation_table_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}
