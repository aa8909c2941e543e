//! Hamilton–Tompkins style QRS detection.
//!
//! derivative -> squaring -> 150 ms moving-window integration -> adaptive
//! signal/noise peak levels with two thresholds, 200 ms refractory period and
//! search-back at half threshold, then refinement of every detection to the
//! local maximum of the input within ±50 ms.

const INTEGRATION_S: f64 = 0.150;
const REFRACTORY_S: f64 = 0.200;
const REFINE_S: f64 = 0.050;
const LEARNING_S: f64 = 2.0;
const SEARCHBACK_RR_FACTOR: f64 = 1.66;

fn derivative(x: &[f64], fs: f64) -> Vec<f64> {
    let n = x.len() as isize;
    let at = |i: isize| if (0..n).contains(&i) { x[i as usize] } else { 0.0 };
    (0..n)
        .map(|i| (2.0 * at(i + 2) + at(i + 1) - at(i - 1) - 2.0 * at(i - 2)) * fs / 8.0)
        .collect()
}

fn moving_average_centered(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    let half = width / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / width as f64
        })
        .collect()
}

struct Levels {
    spki: f64,
    npki: f64,
}

impl Levels {
    fn threshold1(&self) -> f64 {
        self.npki + 0.25 * (self.spki - self.npki)
    }
    fn threshold2(&self) -> f64 {
        0.5 * self.threshold1()
    }
}

/// Returns R-peak sample indices (strictly increasing, gaps ≥ round(0.2·fs)).
pub fn detect_r_peaks(x: &[f64], fs_hz: f64) -> Vec<usize> {
    let n = x.len();
    if n < 5 || !(fs_hz > 0.0) {
        return Vec::new();
    }
    let d = derivative(x, fs_hz);
    let sq: Vec<f64> = d.iter().map(|v| v * v).collect();
    let width = ((INTEGRATION_S * fs_hz).round() as usize).max(1);
    let mwi = moving_average_centered(&sq, width);
    let refractory = ((REFRACTORY_S * fs_hz).round() as usize).max(1);

    let candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1])
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }

    let learn = ((LEARNING_S * fs_hz) as usize).clamp(1, n);
    let peak_max = mwi[..learn].iter().cloned().fold(0.0, f64::max);
    let mean = mwi[..learn].iter().sum::<f64>() / learn as f64;
    let mut lv = Levels {
        spki: peak_max / 3.0,
        npki: mean / 2.0,
    };

    let mut qrs: Vec<usize> = Vec::new();
    // candidates classified as noise since the last detection, for search-back
    let mut pending_noise: Vec<usize> = Vec::new();
    let mut rr: Vec<usize> = Vec::new();

    for &c in &candidates {
        let v = mwi[c];

        if let Some(&last) = qrs.last() {
            if !rr.is_empty() {
                let recent = &rr[rr.len().saturating_sub(8)..];
                let rr_avg = recent.iter().sum::<usize>() as f64 / recent.len() as f64;
                if (c - last) as f64 > SEARCHBACK_RR_FACTOR * rr_avg {
                    let t2 = lv.threshold2();
                    let best = pending_noise
                        .iter()
                        .copied()
                        .filter(|&p| p >= last + refractory && p + refractory <= c && mwi[p] > t2)
                        .max_by(|&a, &b| mwi[a].total_cmp(&mwi[b]));
                    if let Some(p) = best {
                        lv.spki = 0.25 * mwi[p] + 0.75 * lv.spki;
                        rr.push(p - last);
                        qrs.push(p);
                        pending_noise.clear();
                    }
                }
            }
        }

        let t1 = lv.threshold1();
        let last = qrs.last().copied();
        match last {
            Some(l) if c - l < refractory => {
                // inside the refractory period: keep whichever is larger
                if v > mwi[l] && v > t1 {
                    qrs.pop();
                    if let Some(&prev) = qrs.last() {
                        rr.pop();
                        rr.push(c - prev);
                    }
                    qrs.push(c);
                }
            }
            _ if v > t1 => {
                lv.spki = 0.125 * v + 0.875 * lv.spki;
                if let Some(l) = last {
                    rr.push(c - l);
                }
                qrs.push(c);
                pending_noise.clear();
            }
            _ => {
                lv.npki = 0.125 * v + 0.875 * lv.npki;
                pending_noise.push(c);
            }
        }
    }

    // integration plateaus: move each detection to the steepest slope inside its window
    let half = width / 2;
    let centred: Vec<usize> = qrs
        .iter()
        .map(|&c| {
            let lo = c.saturating_sub(half);
            let hi = (c + half + 1).min(n);
            (lo..hi).max_by(|&a, &b| sq[a].total_cmp(&sq[b]).then(b.cmp(&a))).unwrap_or(c)
        })
        .collect();
    refine(x, &centred, fs_hz, refractory)
}

fn refine(x: &[f64], qrs: &[usize], fs_hz: f64, min_gap: usize) -> Vec<usize> {
    let radius = (REFINE_S * fs_hz).round() as usize;
    let mut out: Vec<usize> = Vec::with_capacity(qrs.len());
    for &q in qrs {
        let lo = q.saturating_sub(radius);
        let hi = (q + radius + 1).min(x.len());
        let r = (lo..hi).max_by(|&a, &b| x[a].total_cmp(&x[b]).then(b.cmp(&a))).unwrap_or(q);
        match out.last().copied() {
            Some(prev) if r <= prev || r - prev < min_gap => {
                let before = out.len().checked_sub(2).map(|i| out[i]);
                let fits = before.is_none_or(|pp| r > pp && r - pp >= min_gap);
                if x[r] > x[prev] && fits {
                    *out.last_mut().unwrap() = r;
                }
            }
            _ => out.push(r),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_signal_has_no_peaks() {
        assert!(detect_r_peaks(&vec![0.0; 3000], 300.0).is_empty());
        assert!(detect_r_peaks(&[], 300.0).is_empty());
    }

    #[test]
    fn impulse_train_detected() {
        let fs = 250.0;
        let mut x = vec![0.0; 2500];
        let truth: Vec<usize> = (100..2400).step_by(200).collect();
        for &t in &truth {
            for k in 0..7 {
                let z = k as f64 - 3.0;
                x[t - 3 + k] += (-0.5 * z * z).exp();
            }
        }
        let got = detect_r_peaks(&x, fs);
        assert_eq!(got, truth);
    }
}
