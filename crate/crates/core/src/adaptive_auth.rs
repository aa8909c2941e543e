//! Enrollment, verification, identification and the three-factor adaptive threshold.
//!
//! A user's threshold is `τ_p = τ_b·(w_g(1+F_g) + w_p(1+F_p) + w_l·F_l)` where
//! `F_g` places the baseline between the impostor and genuine means, `F_p`
//! measures how the user's own genuine scores sit against everyone's, and
//! `F_l` locates the baseline among the quartiles of all scores.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{read_bytes, write_bytes};
use crate::error::{Error, Result};

pub const GALLERY_JSON: &str = "gallery.json";
pub const TAU_P_MIN: f64 = 0.01;
pub const TAU_P_MAX: f64 = 0.99;
const DEGENERATE: f64 = 1e-9;

/// Genuine and impostor similarity scores of a labelled embedding set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
    pub per_user_genuine: BTreeMap<String, Vec<f64>>,
}

impl ScoreSet {
    pub fn mu_genuine(&self) -> f64 {
        mean(&self.genuine)
    }

    pub fn mu_impostor(&self) -> f64 {
        mean(&self.impostor)
    }

    /// Population standard deviation of the genuine scores.
    pub fn sigma_genuine(&self) -> f64 {
        let m = self.mu_genuine();
        (self.genuine.iter().map(|s| (s - m).powi(2)).sum::<f64>() / self.genuine.len().max(1) as f64).sqrt()
    }

    /// Genuine and impostor scores pooled.
    pub fn all(&self) -> Vec<f64> {
        self.genuine.iter().chain(&self.impostor).copied().collect()
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// All pairwise cosine scores (`i < j`) of `embeddings` labelled by `users`.
pub fn build_scores(embeddings: &[Vec<f64>], users: &[String]) -> Result<ScoreSet> {
    if embeddings.len() != users.len() {
        return Err(Error::ShapeMismatch(format!("{} embeddings for {} labels", embeddings.len(), users.len())));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for u in users {
        *counts.entry(u).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().all(|&c| c < 2) {
        return Err(Error::InsufficientData(
            "scores need at least two users and one user with two samples".into(),
        ));
    }
    let mut s = ScoreSet::default();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let c = cosine(&embeddings[i], &embeddings[j]);
            if users[i] == users[j] {
                s.genuine.push(c);
                s.per_user_genuine.entry(users[i].clone()).or_default().push(c);
            } else {
                s.impostor.push(c);
            }
        }
    }
    Ok(s)
}

/// `F_g = (τ_b − μ_i) / (μ_g − μ_i)`.
pub fn global_factor(tau_b: f64, mu_g: f64, mu_i: f64) -> Result<f64> {
    if !((mu_g - mu_i).abs() > DEGENERATE) {
        return Err(Error::DegenerateSeparation { mu_g, mu_i });
    }
    Ok((tau_b - mu_i) / (mu_g - mu_i))
}

/// `F_p = (μ_p − μ_g) / σ_g`.
pub fn personal_factor(mu_p: f64, mu_g: f64, sigma_g: f64) -> Result<f64> {
    if !(sigma_g > DEGENERATE) {
        return Err(Error::DegenerateSpread);
    }
    Ok((mu_p - mu_g) / sigma_g)
}

/// Lower empirical quantile: the smallest score `x` with `F(x) ≥ p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// The three quartile knots of the local factor.
pub fn quartiles(scores: &[f64]) -> Result<[f64; 3]> {
    if scores.len() < 4 {
        return Err(Error::TooFewScores(scores.len()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok([quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75)])
}

const LOCAL_LEVELS: [f64; 3] = [0.2, 0.4, 0.6];

/// `F_l`: `τ_b` interpolated over the quartile knots of `scores`, clamped outside.
pub fn local_factor(tau_b: f64, scores: &[f64]) -> Result<f64> {
    Ok(local_factor_from_knots(tau_b, &quartiles(scores)?))
}

pub fn local_factor_from_knots(tau_b: f64, q: &[f64; 3]) -> f64 {
    if tau_b < q[0] {
        return LOCAL_LEVELS[0];
    }
    if tau_b >= q[2] {
        return LOCAL_LEVELS[2];
    }
    // q[i] ≤ τ_b < q[i+1], so the segment has positive width
    let i = usize::from(tau_b >= q[1]);
    let (a, b) = (q[i], q[i + 1]);
    LOCAL_LEVELS[i] + (LOCAL_LEVELS[i + 1] - LOCAL_LEVELS[i]) * (tau_b - a) / (b - a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdWeights {
    pub w_g: f64,
    pub w_p: f64,
    pub w_l: f64,
}

impl Default for ThresholdWeights {
    fn default() -> Self {
        ThresholdWeights {
            w_g: 0.5,
            w_p: 0.3,
            w_l: 0.2,
        }
    }
}

impl ThresholdWeights {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, w) in [("w_g", self.w_g), ("w_p", self.w_p), ("w_l", self.w_l)] {
            if !(w >= 0.0 && w.is_finite()) {
                errs.push(format!("weights.{name} must be a non-negative number, got {w}"));
            }
        }
        errs
    }
}

/// Unclamped `τ_b·(w_g(1+F_g) + w_p(1+F_p) + w_l·F_l)`.
pub fn raw_threshold(tau_b: f64, f_g: f64, f_p: f64, f_l: f64, w: &ThresholdWeights) -> f64 {
    tau_b * (w.w_g * (1.0 + f_g) + w.w_p * (1.0 + f_p) + w.w_l * f_l)
}

/// The adaptive threshold clamped to `[0.01, 0.99]`, and whether clamping applied.
pub fn adaptive_threshold(tau_b: f64, f_g: f64, f_p: f64, f_l: f64, w: &ThresholdWeights) -> (f64, bool) {
    let raw = raw_threshold(tau_b, f_g, f_p, f_l, w);
    let t = raw.clamp(TAU_P_MIN, TAU_P_MAX);
    (t, t != raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProfile {
    pub user: String,
    pub tau_b: f64,
    pub f_g: f64,
    pub f_p: f64,
    pub f_l: f64,
    pub tau_p: f64,
    pub clamped: bool,
    pub weights: ThresholdWeights,
}

impl ThresholdProfile {
    /// Re-evaluates the weighted formula from the stored factors.
    pub fn recompute(&self) -> (f64, bool) {
        adaptive_threshold(self.tau_b, self.f_g, self.f_p, self.f_l, &self.weights)
    }
}

/// Profiles for every user holding genuine scores in `scores`.
///
/// Users with fewer than one genuine score take `μ_p = μ_g` (`F_p = 0`).
pub fn threshold_profiles(scores: &ScoreSet, tau_b: f64, users: &[String], w: &ThresholdWeights) -> Result<Vec<ThresholdProfile>> {
    let (mu_g, mu_i, sigma_g) = (scores.mu_genuine(), scores.mu_impostor(), scores.sigma_genuine());
    let f_g = global_factor(tau_b, mu_g, mu_i)?;
    let f_l = local_factor(tau_b, &scores.all())?;
    users
        .iter()
        .map(|u| {
            let mu_p = scores.per_user_genuine.get(u).filter(|v| !v.is_empty()).map_or(mu_g, |v| mean(v));
            let f_p = personal_factor(mu_p, mu_g, sigma_g)?;
            let (tau_p, clamped) = adaptive_threshold(tau_b, f_g, f_p, f_l, w);
            Ok(ThresholdProfile {
                user: u.clone(),
                tau_b,
                f_g,
                f_p,
                f_l,
                tau_p,
                clamped,
                weights: *w,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub user: String,
    pub vector: Vec<f64>,
}

/// Unit-norm mean of a user's embeddings.
pub fn enroll(user: &str, embeddings: &[Vec<f64>]) -> Result<Template> {
    let Some(first) = embeddings.first() else {
        return Err(Error::InsufficientData(format!("no embeddings to enroll user {user}")));
    };
    let dim = first.len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::ShapeMismatch(format!("embeddings of user {user} differ in width")));
    }
    let mut m = vec![0.0; dim];
    for e in embeddings {
        m.iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|v| *v /= embeddings.len() as f64);
    let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < DEGENERATE {
        return Err(Error::ZeroMean(user.to_string()));
    }
    Ok(Template {
        user: user.to_string(),
        vector: m.into_iter().map(|v| v / n).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept,
    Reject,
}

/// Cosine score of `probe` against the template and the decision at `tau_p`.
pub fn verify(probe: &[f64], template: &Template, tau_p: f64) -> (Decision, f64) {
    let s = cosine(probe, &template.vector);
    (if s >= tau_p { Decision::Accept } else { Decision::Reject }, s)
}

/// Nearest template by cosine; ties go to the lexicographically smaller user.
pub fn identify<'a>(probe: &[f64], templates: &'a [Template]) -> Result<(&'a Template, f64)> {
    let mut best: Option<(&Template, f64)> = None;
    for t in templates {
        let s = cosine(probe, &t.vector);
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && t.user < b.user),
        };
        if better {
            best = Some((t, s));
        }
    }
    best.ok_or(Error::NoTemplates)
}

/// One enrolled user: template plus threshold profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub template: Vec<f64>,
    pub tau_p: f64,
    #[serde(rename = "F_g")]
    pub f_g: f64,
    #[serde(rename = "F_p")]
    pub f_p: f64,
    #[serde(rename = "F_l")]
    pub f_l: f64,
    pub tau_b: f64,
    pub clamped: bool,
    pub weights: ThresholdWeights,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gallery {
    pub users: BTreeMap<String, GalleryEntry>,
}

impl Gallery {
    pub fn from_parts(templates: &[Template], profiles: &[ThresholdProfile]) -> Result<Self> {
        let mut users = BTreeMap::new();
        for t in templates {
            let p = profiles
                .iter()
                .find(|p| p.user == t.user)
                .ok_or_else(|| Error::InsufficientData(format!("no threshold profile for user {}", t.user)))?;
            users.insert(
                t.user.clone(),
                GalleryEntry {
                    template: t.vector.clone(),
                    tau_p: p.tau_p,
                    f_g: p.f_g,
                    f_p: p.f_p,
                    f_l: p.f_l,
                    tau_b: p.tau_b,
                    clamped: p.clamped,
                    weights: p.weights,
                },
            );
        }
        Ok(Gallery { users })
    }

    pub fn templates(&self) -> Vec<Template> {
        self.users
            .iter()
            .map(|(u, e)| Template {
                user: u.clone(),
                vector: e.template.clone(),
            })
            .collect()
    }

    pub fn entry(&self, user: &str) -> Option<(Template, f64)> {
        self.users.get(user).map(|e| {
            (
                Template {
                    user: user.to_string(),
                    vector: e.template.clone(),
                },
                e.tau_p,
            )
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &serde_json::to_vec_pretty(self).expect("gallery serialises"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
