//! Second-order Butterworth low-pass and prominence-based peak picking.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// Second-order Butterworth low-pass section (bilinear transform).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Butterworth2 {
    b: [f64; 3],
    a: [f64; 2],
}

impl Butterworth2 {
    pub fn low_pass(cutoff_hz: f64, sample_hz: f64) -> Result<Self> {
        if !(cutoff_hz > 0.0 && cutoff_hz < sample_hz / 2.0) {
            return Err(Error::Config(format!(
                "cutoff {cutoff_hz} Hz must lie in (0, {}) Hz",
                sample_hz / 2.0
            )));
        }
        let k = (PI * cutoff_hz / sample_hz).tan();
        let norm = 1.0 / (1.0 + SQRT_2 * k + k * k);
        let b0 = k * k * norm;
        Ok(Butterworth2 {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - SQRT_2 * k + k * k) * norm],
        })
    }

    /// Causal pass, with the state initialised to the steady state of the
    /// first sample so a constant signal passes unchanged.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let Some(&x0) = x.first() else {
            return Vec::new();
        };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let mut z2 = (b2 - a2) * x0;
        let mut z1 = (b1 - a1) * x0 + z2;
        x.iter()
            .map(|&xi| {
                let y = b0 * xi + z1;
                z1 = b1 * xi - a1 * y + z2;
                z2 = b2 * xi - a2 * y;
                y
            })
            .collect()
    }

    /// Zero-phase forward-backward pass.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.filter(x);
        y.reverse();
        let mut y = self.filter(&y);
        y.reverse();
        y
    }
}

/// Indices of local maxima that are at least `min_distance` samples apart
/// (higher peaks win) and stand out from their surroundings by at least
/// `min_prominence`.
pub fn find_peaks(x: &[f64], min_prominence: f64, min_distance: usize) -> Vec<usize> {
    let n = x.len();
    let mut candidates: Vec<usize> = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if x[i] > x[i - 1] {
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] {
                candidates.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }

    let mut keep = vec![true; candidates.len()];
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| x[candidates[b]].total_cmp(&x[candidates[a]]).then(a.cmp(&b)));
    for &k in &order {
        if !keep[k] {
            continue;
        }
        let p = candidates[k];
        let mut j = k;
        while j > 0 && p - candidates[j - 1] < min_distance {
            j -= 1;
            keep[j] = false;
        }
        let mut j = k + 1;
        while j < candidates.len() && candidates[j] - p < min_distance {
            keep[j] = false;
            j += 1;
        }
    }

    candidates
        .into_iter()
        .zip(keep)
        .filter(|&(p, k)| k && prominence(x, p) >= min_prominence)
        .map(|(p, _)| p)
        .collect()
}

/// Height of a peak above the higher of its two bases, each base being the
/// lowest point between the peak and the nearest strictly higher sample.
pub fn prominence(x: &[f64], peak: usize) -> f64 {
    let h = x[peak];
    let mut left_min = h;
    for &v in x[..peak].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &x[peak + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}
