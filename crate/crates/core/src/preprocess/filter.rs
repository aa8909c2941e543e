//! Butterworth IIR design by analog prototype + bilinear transform.
//!
//! The design follows the usual zero/pole/gain route: prototype poles on the
//! unit circle in the left half plane, frequency pre-warping, low-pass to
//! high-/band-pass transformation, bilinear mapping, then expansion into
//! transfer-function coefficients. `order` is the prototype order, so a
//! band-pass of order 4 has 8 poles.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    Bandpass,
    Highpass,
}

/// Transfer-function coefficients, `a[0] == 1`.
///
/// Designed filters also carry the same transfer function factored into
/// second-order sections; [`filter_forward`] runs those when present because
/// the expanded high-order polynomial loses precision near z = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IirFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sections: Vec<Biquad>,
}

/// One second-order section: `b0 b1 b2 / 1 a1 a2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

struct Zpk {
    z: Vec<Complex64>,
    p: Vec<Complex64>,
    k: f64,
}

fn butter_prototype(order: usize) -> Zpk {
    let n = order as f64;
    let p = (0..order)
        .map(|m| {
            let theta = PI * (2.0 * m as f64 + 1.0 - n) / (2.0 * n);
            -Complex64::new(0.0, theta).exp()
        })
        .collect();
    Zpk { z: vec![], p, k: 1.0 }
}

fn lp2hp(proto: Zpk, wo: f64) -> Zpk {
    let degree = proto.p.len() - proto.z.len();
    let wo_c = Complex64::new(wo, 0.0);
    let z: Vec<Complex64> = proto
        .z
        .iter()
        .map(|&z| wo_c / z)
        .chain(std::iter::repeat_n(Complex64::new(0.0, 0.0), degree))
        .collect();
    let p = proto.p.iter().map(|&p| wo_c / p).collect();
    let num: Complex64 = proto.z.iter().map(|&z| -z).product();
    let den: Complex64 = proto.p.iter().map(|&p| -p).product();
    Zpk {
        z,
        p,
        k: proto.k * (num / den).re,
    }
}

fn lp2bp(proto: Zpk, wo: f64, bw: f64) -> Zpk {
    let degree = proto.p.len() - proto.z.len();
    let wo2 = Complex64::new(wo * wo, 0.0);
    let split = |roots: &[Complex64]| -> Vec<Complex64> {
        let scaled: Vec<Complex64> = roots.iter().map(|&r| r * (bw / 2.0)).collect();
        let plus = scaled.iter().map(|&r| r + (r * r - wo2).sqrt());
        let minus = scaled.iter().map(|&r| r - (r * r - wo2).sqrt());
        plus.chain(minus).collect()
    };
    let mut z = split(&proto.z);
    z.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), degree));
    Zpk {
        z,
        p: split(&proto.p),
        k: proto.k * bw.powi(degree as i32),
    }
}

fn bilinear(analog: Zpk, fs: f64) -> Zpk {
    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let degree = analog.p.len() - analog.z.len();
    let z: Vec<Complex64> = analog
        .z
        .iter()
        .map(|&z| (fs2 + z) / (fs2 - z))
        .chain(std::iter::repeat_n(Complex64::new(-1.0, 0.0), degree))
        .collect();
    let p = analog.p.iter().map(|&p| (fs2 + p) / (fs2 - p)).collect();
    let num: Complex64 = analog.z.iter().map(|&z| fs2 - z).product();
    let den: Complex64 = analog.p.iter().map(|&p| fs2 - p).product();
    Zpk {
        z,
        p,
        k: analog.k * (num / den).re,
    }
}

/// Expands `prod (x - r)` into descending-power coefficients.
fn poly(roots: &[Complex64]) -> Vec<Complex64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * r;
        }
        c = next;
    }
    c
}

/// Groups roots into real-coefficient factors of degree ≤ 2.
fn quadratic_factors(roots: &[Complex64]) -> Vec<[f64; 3]> {
    const TOL: f64 = 1e-12;
    let mut complex: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > TOL).collect();
    complex.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let mut real: Vec<f64> = roots.iter().filter(|r| r.im.abs() <= TOL).map(|r| r.re).collect();
    real.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let mut out: Vec<[f64; 3]> = complex.iter().map(|r| [1.0, -2.0 * r.re, r.norm_sqr()]).collect();
    for pair in real.chunks(2) {
        match pair {
            [r1, r2] => out.push([1.0, -(r1 + r2), r1 * r2]),
            [r] => out.push([1.0, -r, 0.0]),
            _ => unreachable!(),
        }
    }
    out
}

fn to_sections(zpk: &Zpk) -> Vec<Biquad> {
    let dens = quadratic_factors(&zpk.p);
    let mut nums = quadratic_factors(&zpk.z);
    nums.resize(dens.len().max(nums.len()), [1.0, 0.0, 0.0]);
    let mut sections: Vec<Biquad> = dens
        .into_iter()
        .chain(std::iter::repeat([1.0, 0.0, 0.0]))
        .zip(nums)
        .map(|(a, b)| Biquad { b, a })
        .collect();
    if let Some(first) = sections.first_mut() {
        for v in first.b.iter_mut() {
            *v *= zpk.k;
        }
    }
    sections
}

/// Designs a digital Butterworth filter.
///
/// `cutoffs_hz` holds one edge for high-pass and two ascending edges for band-pass.
pub fn design_butterworth(order: usize, kind: FilterKind, cutoffs_hz: &[f64], fs_hz: f64) -> Result<IirFilter> {
    if order == 0 {
        return Err(Error::InvalidCutoff("filter order must be at least 1".into()));
    }
    if !(fs_hz > 0.0) {
        return Err(Error::InvalidCutoff(format!("sampling rate must be positive, got {fs_hz}")));
    }
    let nyquist = fs_hz / 2.0;
    let expected = match kind {
        FilterKind::Bandpass => 2,
        FilterKind::Highpass => 1,
    };
    if cutoffs_hz.len() != expected {
        return Err(Error::InvalidCutoff(format!(
            "{kind:?} needs {expected} cutoff(s), got {}",
            cutoffs_hz.len()
        )));
    }
    for &c in cutoffs_hz {
        if !(c > 0.0 && c < nyquist) {
            return Err(Error::InvalidCutoff(format!("cutoff {c} Hz outside (0, {nyquist}) Hz")));
        }
    }
    if kind == FilterKind::Bandpass && cutoffs_hz[0] >= cutoffs_hz[1] {
        return Err(Error::InvalidCutoff("band-pass cutoffs must be ascending".into()));
    }

    let warp = |f: f64| 2.0 * fs_hz * (PI * f / fs_hz).tan();
    let proto = butter_prototype(order);
    let analog = match kind {
        FilterKind::Highpass => lp2hp(proto, warp(cutoffs_hz[0])),
        FilterKind::Bandpass => {
            let (lo, hi) = (warp(cutoffs_hz[0]), warp(cutoffs_hz[1]));
            lp2bp(proto, (lo * hi).sqrt(), hi - lo)
        }
    };
    let digital = bilinear(analog, fs_hz);
    if let Some(p) = digital.p.iter().find(|p| p.norm() >= 1.0 || !p.norm().is_finite()) {
        return Err(Error::UnstableResult(format!("pole {p} on or outside the unit circle")));
    }
    let b: Vec<f64> = poly(&digital.z).iter().map(|c| c.re * digital.k).collect();
    let a: Vec<f64> = poly(&digital.p).iter().map(|c| c.re).collect();
    let sections = to_sections(&digital);
    let filter = IirFilter { b, a, sections };
    if !filter.is_stable() {
        return Err(Error::UnstableResult("denominator fails the stability test".into()));
    }
    Ok(filter)
}

impl IirFilter {
    /// Schur–Cohn step-down test: every root of `a` strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        if self.a.is_empty() || self.a[0] == 0.0 {
            return false;
        }
        let mut a: Vec<f64> = self.a.iter().map(|v| v / self.a[0]).collect();
        while a.len() > 1 {
            let m = a.len() - 1;
            let k = a[m];
            if !(k.abs() < 1.0) {
                return false;
            }
            let denom = 1.0 - k * k;
            a = (0..m).map(|i| (a[i] - k * a[m - i]) / denom).collect();
        }
        true
    }

    /// Magnitude of the frequency response at `f_hz`.
    pub fn gain_at(&self, f_hz: f64, fs_hz: f64) -> f64 {
        let w = 2.0 * PI * f_hz / fs_hz;
        let eval = |c: &[f64]| -> Complex64 {
            c.iter()
                .enumerate()
                .map(|(i, &ci)| ci * Complex64::new(0.0, -w * i as f64).exp())
                .sum()
        };
        (eval(&self.b) / eval(&self.a)).norm()
    }
}

/// Applies the filter with zero initial state: the section cascade when
/// available, otherwise transposed direct form II on `b`/`a`.
pub fn filter_forward(filter: &IirFilter, x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidRecord("cannot filter an empty signal".into()));
    }
    if filter.sections.is_empty() {
        Ok(direct_form(filter, x))
    } else {
        let mut y = x.to_vec();
        for s in &filter.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let xn = *v;
                let yn = s.b[0] * xn + z1;
                z1 = s.b[1] * xn - s.a[1] * yn + z2;
                z2 = s.b[2] * xn - s.a[2] * yn;
                *v = yn;
            }
        }
        Ok(y)
    }
}

/// Transposed direct form II over the expanded coefficients.
pub fn direct_form(filter: &IirFilter, x: &[f64]) -> Vec<f64> {
    let a0 = filter.a[0];
    let b: Vec<f64> = filter.b.iter().map(|v| v / a0).collect();
    let a: Vec<f64> = filter.a.iter().map(|v| v / a0).collect();
    let order = b.len().max(a.len());
    let coef = |c: &[f64], i: usize| c.get(i).copied().unwrap_or(0.0);
    let mut state = vec![0.0; order];
    let mut y = Vec::with_capacity(x.len());
    for &xn in x {
        let yn = coef(&b, 0) * xn + state[0];
        for i in 1..order {
            let next = if i < order - 1 { state[i] } else { 0.0 };
            state[i - 1] = coef(&b, i) * xn - coef(&a, i) * yn + next;
        }
        y.push(yn);
    }
    y
}

/// Population z-score; fails on (near-)constant input.
pub fn zscore(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::DegenerateSignal(0.0));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-9) {
        return Err(Error::DegenerateSignal(std));
    }
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}
