//! Test-side oracles shared by integration tests.

#![allow(dead_code)]

pub mod oracle;

use std::f64::consts::PI;

use attentionet::dsp::dataset::LabeledWindow;

/// Log power per channel in 2 Hz bins from 2 to 44 Hz, by direct DFT.
pub fn band_power_features(w: &LabeledWindow) -> Vec<f64> {
    let d = w.data.data();
    let t = 128;
    let mut out = Vec::new();
    for ch in d.chunks(t) {
        let mut bins = [0.0f64; 21];
        for k in 2..44 {
            let om = 2.0 * PI * k as f64 / t as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in ch.iter().enumerate() {
                re += v * (om * i as f64).cos();
                im += v * (om * i as f64).sin();
            }
            bins[(k - 2) / 2] += re * re + im * im;
        }
        out.extend(bins.iter().map(|p| (p + 1e-9).ln()));
    }
    out
}

/// Multinomial logistic regression fitted by full-batch gradient descent on
/// standardized features.
pub struct Logistic {
    mean: Vec<f64>,
    std: Vec<f64>,
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Logistic {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, iters: usize) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in x {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std: Vec<f64> = std.iter().map(|s| s.sqrt().max(1e-9)).collect();
        let xs: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        let mut w = vec![vec![0.0; d]; classes];
        let mut b = vec![0.0; classes];
        let lr = 0.5;
        let l2 = 1e-3;
        for _ in 0..iters {
            let mut gw = vec![vec![0.0; d]; classes];
            let mut gb = vec![0.0; classes];
            for (r, &label) in xs.iter().zip(y) {
                let p = softmax(&scores(&w, &b, r));
                for c in 0..classes {
                    let e = p[c] - if c == label { 1.0 } else { 0.0 };
                    gb[c] += e / n;
                    for (g, v) in gw[c].iter_mut().zip(r) {
                        *g += e * v / n;
                    }
                }
            }
            for c in 0..classes {
                b[c] -= lr * gb[c];
                for j in 0..d {
                    w[c][j] -= lr * (gw[c][j] + l2 * w[c][j]);
                }
            }
        }
        Self { mean, std, w, b }
    }

    pub fn predict(&self, r: &[f64]) -> usize {
        let z: Vec<f64> = r
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let s = scores(&self.w, &self.b, &z);
        let mut best = 0;
        for (i, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = i;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let ok = x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count();
        ok as f64 / y.len() as f64
    }
}

fn scores(w: &[Vec<f64>], b: &[f64], r: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(wc, bc)| bc + wc.iter().zip(r).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Within-subject accuracy: fit on windows from the first half of every
/// segment, test on windows wholly inside the second half.
pub fn within_subject_accuracy(windows: &[LabeledWindow], segment_len: usize) -> f64 {
    let mut subjects: Vec<&str> = windows.iter().map(|w| w.subject_id.as_str()).collect();
    subjects.dedup();
    let half = segment_len / 2;
    let mut accs = Vec::new();
    for s in subjects {
        let mine: Vec<&LabeledWindow> = windows.iter().filter(|w| w.subject_id == s).collect();
        let (mut xtr, mut ytr, mut xte, mut yte) = (vec![], vec![], vec![], vec![]);
        for w in mine {
            if w.offset + 128 <= half {
                xtr.push(band_power_features(w));
                ytr.push(w.label.code());
            } else if w.offset >= half {
                xte.push(band_power_features(w));
                yte.push(w.label.code());
            }
        }
        let m = Logistic::fit(&xtr, &ytr, 5, 200);
        accs.push(m.accuracy(&xte, &yte));
    }
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// Leave-one-subject-out accuracy of the band-power oracle.
pub fn cross_subject_accuracy(windows: &[LabeledWindow]) -> f64 {
    let feats: Vec<Vec<f64>> = windows.iter().map(band_power_features).collect();
    let mut subjects: Vec<&str> = windows.iter().map(|w| w.subject_id.as_str()).collect();
    subjects.dedup();
    let mut accs = Vec::new();
    for s in subjects {
        let (mut xtr, mut ytr, mut xte, mut yte) = (vec![], vec![], vec![], vec![]);
        for (w, f) in windows.iter().zip(&feats) {
            if w.subject_id == s {
                xte.push(f.clone());
                yte.push(w.label.code());
            } else {
                xtr.push(f.clone());
                ytr.push(w.label.code());
            }
        }
        let m = Logistic::fit(&xtr, &ytr, 5, 200);
        accs.push(m.accuracy(&xte, &yte));
    }
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// One-sided PSD estimate at `f` Hz: mean Hann-windowed periodogram over
/// non-overlapping blocks of `block` samples.
pub fn psd_at(x: &[f64], f: f64, fs: f64, block: usize) -> f64 {
    let w: Vec<f64> = (0..block)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / block as f64).cos())
        .collect();
    let u: f64 = w.iter().map(|v| v * v).sum();
    let om = 2.0 * PI * f / fs;
    let mut acc = 0.0;
    let mut count = 0;
    for chunk in x.chunks_exact(block) {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, (v, wi)) in chunk.iter().zip(&w).enumerate() {
            re += v * wi * (om * i as f64).cos();
            im -= v * wi * (om * i as f64).sin();
        }
        acc += 2.0 * (re * re + im * im) / (fs * u);
        count += 1;
    }
    acc / count as f64
}

/// Windows for one subject where class `k` is a sinusoid at `4 + 6k` Hz
/// on every channel plus noise: trivially separable.
pub fn toy_windows(subject: &str, per_class: usize, seed: u64) -> Vec<LabeledWindow> {
    use attentionet::dsp::{normalize_window, AttentionClass};
    use attentionet::Tensor;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (k, class) in AttentionClass::ALL.into_iter().enumerate() {
        let f = 4.0 + 6.0 * k as f64;
        for i in 0..per_class {
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let noise: Vec<f64> = (0..14 * 128).map(|_| rng.random_range(-0.3..0.3)).collect();
            let raw = Tensor::from_fn(&[14, 128], |j| (2.0 * PI * f * (j % 128) as f64 / 128.0 + phase).sin() + noise[j]);
            out.push(LabeledWindow {
                subject_id: subject.to_string(),
                label: class,
                segment: k,
                offset: i * 32,
                data: normalize_window(&raw).unwrap(),
            });
        }
    }
    out
}
