//! Training objective: `α·focal(logits) + (1−α)·ms(embeddings)`.
//!
//! The losses are evaluated in double precision on plain slices and return
//! their gradients explicitly; [`total_loss_on_tape`] splices the result
//! into a [`Tape`] so it can terminate a network's backward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the focal term.
    pub alpha: f64,
    /// Similarity offset λ.
    pub lambda_thresh: f64,
    /// Truncation bound τ.
    pub tau_clip: f64,
    pub beta_p: f64,
    pub beta_n: f64,
    pub eps: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.05,
            lambda_thresh: 0.5,
            tau_clip: 1.0,
            beta_p: 2.0,
            beta_n: 50.0,
            eps: 1e-8,
            focal_gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            errs.push(format!("loss.alpha must lie in [0,1], got {}", self.alpha));
        }
        if !(self.tau_clip > 0.0) {
            errs.push(format!("loss.tau_clip must be positive, got {}", self.tau_clip));
        }
        if !(self.beta_p > 0.0) {
            errs.push(format!("loss.beta_p must be positive, got {}", self.beta_p));
        }
        if !(self.beta_n > 0.0) {
            errs.push(format!("loss.beta_n must be positive, got {}", self.beta_n));
        }
        if !(self.eps >= 0.0) {
            errs.push(format!("loss.eps must be non-negative, got {}", self.eps));
        }
        if !(self.focal_gamma >= 0.0) {
            errs.push(format!("loss.focal_gamma must be non-negative, got {}", self.focal_gamma));
        }
        if !self.lambda_thresh.is_finite() {
            errs.push("loss.lambda_thresh must be finite".into());
        }
        errs
    }
}

/// A scalar loss with its gradient with respect to the input buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn norms(f: &[f64], dim: usize) -> Vec<f64> {
    f.chunks_exact(dim).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `S[i][j] = fᵢ·fⱼ / (‖fᵢ‖‖fⱼ‖ + eps)` for row-major `f [N,dim]`.
pub fn cosine_sim_matrix(f: &[f64], dim: usize, eps: f64) -> Vec<f64> {
    let n = f.len() / dim;
    let nr = norms(f, dim);
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&f[i * dim..(i + 1) * dim], &f[j * dim..(j + 1) * dim]) / (nr[i] * nr[j] + eps);
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    s
}

/// `max(−τ, min(τ, s − λ))`.
pub fn truncate_sim(s: f64, lambda: f64, tau: f64) -> f64 {
    (s - lambda).min(tau).max(-tau)
}

/// `log(1 + Σ eᵃ)` and the weights `eᵃʲ / (1 + Σ eᵃ)`, without overflow.
fn log1p_sum_exp(a: &[f64]) -> (f64, Vec<f64>) {
    if a.is_empty() {
        return (0.0, Vec::new());
    }
    let m = a.iter().copied().fold(0.0f64, f64::max);
    let e: Vec<f64> = a.iter().map(|&x| (x - m).exp()).collect();
    let z = (-m).exp() + e.iter().sum::<f64>();
    (m + z.ln(), e.into_iter().map(|x| x / z).collect())
}

/// Multi-similarity loss of a precomputed similarity matrix `s [N,N]` and
/// `dL/dS_ij` taken through anchor `i` (row-major, not symmetrised).
pub fn ms_loss_from_similarity(s: &[f64], labels: &[usize], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let n = labels.len();
    let (lam, tau) = (cfg.lambda_thresh, cfg.tau_clip);
    let inv_n = 1.0 / n as f64;
    let mut g = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for (positive, beta) in [(true, cfg.beta_p), (false, cfg.beta_n)] {
            let js: Vec<usize> = (0..n).filter(|&j| j != i && (labels[j] == labels[i]) == positive).collect();
            let sign = if positive { -1.0 } else { 1.0 };
            let a: Vec<f64> = js.iter().map(|&j| sign * beta * truncate_sim(s[i * n + j], lam, tau)).collect();
            let (lse, w) = log1p_sum_exp(&a);
            total += lse / beta;
            for (&j, wj) in js.iter().zip(w) {
                if (s[i * n + j] - lam).abs() < tau {
                    g[i * n + j] = sign * wj * inv_n;
                }
            }
        }
    }
    (total * inv_n, g)
}

/// Truncated multi-similarity loss of embeddings `f [N,dim]` and its gradient.
///
/// Self-pairs are excluded; an anchor without positives (or negatives)
/// contributes nothing to that term.
pub fn ms_loss(f: &[f64], dim: usize, labels: &[usize], cfg: &LossConfig) -> Result<LossGrad> {
    if dim == 0 || f.len() % dim != 0 || f.len() / dim != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "ms_loss needs [N,{dim}] embeddings for {} labels, got {} values",
            labels.len(),
            f.len()
        )));
    }
    let n = labels.len();
    let s = cosine_sim_matrix(f, dim, cfg.eps);
    let (value, g) = ms_loss_from_similarity(&s, labels, cfg);

    let nr = norms(f, dim);
    let mut grad = vec![0.0; f.len()];
    for i in 0..n {
        let fi = &f[i * dim..(i + 1) * dim];
        let gi = &mut grad[i * dim..(i + 1) * dim];
        for j in 0..n {
            let h = g[i * n + j] + g[j * n + i];
            if j == i || h == 0.0 {
                continue;
            }
            let fj = &f[j * dim..(j + 1) * dim];
            let den = nr[i] * nr[j] + cfg.eps;
            let a = h / den;
            let b = if nr[i] > 0.0 { h * dot(fi, fj) * nr[j] / (nr[i] * den * den) } else { 0.0 };
            for ((gv, &x), &y) in gi.iter_mut().zip(fi).zip(fj) {
                *gv += a * y - b * x;
            }
        }
    }
    Ok(LossGrad { value, grad })
}

fn check_logits(logits: &[f64], c: usize, labels: &[usize]) -> Result<()> {
    if c < 2 || logits.len() != c * labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "focal loss needs [N,C≥2] logits for {} labels, got {} values with C={c}",
            labels.len(),
            logits.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&t| t >= c) {
        return Err(Error::ShapeMismatch(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Mean focal loss `−(1−p_t)^γ log p_t` over rows of `logits [N,C]`.
pub fn focal_loss(logits: &[f64], c: usize, labels: &[usize], gamma: f64) -> Result<LossGrad> {
    check_logits(logits, c, labels)?;
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for ((z, g), &t) in logits.chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(labels) {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        let log_q = z[t] - m - sum.ln();
        let p: Vec<f64> = e.iter().map(|v| v / sum).collect();
        let q = p[t];
        // 1 − q summed from the other classes keeps precision when q → 1
        let one_minus_q: f64 = p.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, v)| v).sum();
        let focus = one_minus_q.powf(gamma);
        total += -focus * log_q;
        let lead = if gamma == 0.0 || one_minus_q == 0.0 { 0.0 } else { gamma * one_minus_q.powf(gamma - 1.0) * q * log_q };
        let coef = (lead - focus) / n as f64;
        for (j, gv) in g.iter_mut().enumerate() {
            let delta = if j == t { 1.0 } else { 0.0 };
            *gv = coef * (delta - p[j]);
        }
    }
    Ok(LossGrad { value: total / n as f64, grad })
}

/// Value of the combined objective and both parts, with gradients for each head.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub focal: f64,
    pub ms: f64,
    pub grad_logits: Vec<f64>,
    pub grad_embeddings: Vec<f64>,
}

pub fn total_loss(
    logits: &[f64],
    n_classes: usize,
    embeddings: &[f64],
    dim: usize,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let fl = focal_loss(logits, n_classes, labels, cfg.focal_gamma)?;
    let ms = ms_loss(embeddings, dim, labels, cfg)?;
    let a = cfg.alpha;
    Ok(TotalLoss {
        value: a * fl.value + (1.0 - a) * ms.value,
        focal: fl.value,
        ms: ms.value,
        grad_logits: fl.grad.into_iter().map(|g| a * g).collect(),
        grad_embeddings: ms.grad.into_iter().map(|g| (1.0 - a) * g).collect(),
    })
}

/// Records the combined objective on `tape` as a scalar node fed by
/// `logits [N,C]` and `embeddings [N,E]`.
pub fn total_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    embeddings: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(Var, TotalLoss)> {
    total_loss_on_tape_groups(tape, &[(logits, embeddings)], labels, cfg)
}

/// Like [`total_loss_on_tape`] for a batch held in several row groups
/// (for instance one per input length); `labels` follow the groups in order.
pub fn total_loss_on_tape_groups<T: Real>(
    tape: &mut Tape<T>,
    groups: &[(Var, Var)],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(Var, TotalLoss)> {
    let (mut l64, mut e64) = (Vec::new(), Vec::new());
    let (mut n_classes, mut dim) = (None, None);
    for &(lv, ev) in groups {
        let (ls, es) = (tape.shape(lv), tape.shape(ev));
        if ls.len() != 2 || es.len() != 2 || ls[0] != es[0] {
            return Err(Error::ShapeMismatch(format!("loss expects [N,C] logits and [N,E] embeddings, got {ls:?}, {es:?}")));
        }
        if *n_classes.get_or_insert(ls[1]) != ls[1] || *dim.get_or_insert(es[1]) != es[1] {
            return Err(Error::ShapeMismatch("loss groups disagree on width".into()));
        }
        l64.extend(tape.value(lv).to_f64_vec());
        e64.extend(tape.value(ev).to_f64_vec());
    }
    let (Some(c), Some(d)) = (n_classes, dim) else {
        return Err(Error::ShapeMismatch("loss needs at least one group".into()));
    };
    let out = total_loss(&l64, c, &e64, d, labels, cfg)?;
    let cast = |g: &[f64]| g.iter().map(|&v| T::lit(v)).collect::<Vec<T>>();
    let (mut inputs, mut grads) = (Vec::new(), Vec::new());
    let (mut lo, mut eo) = (0, 0);
    for &(lv, ev) in groups {
        let (nl, ne) = (tape.value(lv).len(), tape.value(ev).len());
        inputs.extend([lv, ev]);
        grads.push(cast(&out.grad_logits[lo..lo + nl]));
        grads.push(cast(&out.grad_embeddings[eo..eo + ne]));
        lo += nl;
        eo += ne;
    }
    let v = tape.precomputed(&inputs, T::lit(out.value), grads)?;
    Ok((v, out))
}
