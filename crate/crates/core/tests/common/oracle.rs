//! Independent reference implementations used as test oracles.

use std::f64::consts::PI;

use attentionet::batchnorm::BatchNormState;
use attentionet::dsp::SAMPLE_RATE;
use attentionet::dsp::FilterSpec;
use attentionet::model::params::{CaParams, NtaParams};
use attentionet::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const FS: f64 = SAMPLE_RATE as f64;

pub const EPS: f64 = 1e-5;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn random_bn(rng: &mut ChaCha8Rng, c: usize) -> BatchNormState {
    let mut s = BatchNormState::new(c);
    s.gamma = uniform(rng, &[c], 0.5, 1.5);
    s.beta = uniform(rng, &[c], -0.5, 0.5);
    s.running_mean = uniform(rng, &[c], -0.5, 0.5);
    s.running_var = uniform(rng, &[c], 0.5, 2.0);
    s.eps = EPS;
    s
}

pub fn at(t: &Tensor, b: usize, c: usize, i: usize) -> f64 {
    let s = t.shape();
    t.data()[(b * s[1] + c) * s[2] + i]
}

/// Batch-norm of `[B][C][T]` nested data, eval (running) or train (two-pass
/// batch statistics).
pub fn bn_oracle(x: &[Vec<Vec<f64>>], s: &BatchNormState, train: bool) -> Vec<Vec<Vec<f64>>> {
    let (bn, c, t) = (x.len(), x[0].len(), x[0][0].len());
    let mut out = x.to_vec();
    for ch in 0..c {
        let (mean, var) = if train {
            let n = (bn * t) as f64;
            let m = (0..bn).flat_map(|b| x[b][ch].iter()).sum::<f64>() / n;
            let v = (0..bn).flat_map(|b| x[b][ch].iter()).map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            (m, v)
        } else {
            (s.running_mean.data()[ch], s.running_var.data()[ch])
        };
        for b in 0..bn {
            for i in 0..t {
                out[b][ch][i] = (x[b][ch][i] - mean) / (var + s.eps).sqrt() * s.gamma.data()[ch] + s.beta.data()[ch];
            }
        }
    }
    out
}

pub fn assert_close(got: &Tensor, want: &[Vec<Vec<f64>>], tol: f64) {
    let flat: Vec<f64> = want.iter().flatten().flatten().copied().collect();
    assert_eq!(got.len(), flat.len());
    for (k, (a, b)) in got.data().iter().zip(&flat).enumerate() {
        assert!((a - b).abs() <= tol, "entry {k}: {a} vs {b}");
    }
}


pub fn random_ca(rng: &mut ChaCha8Rng, cf: usize, hidden: usize) -> CaParams {
    CaParams {
        fc1_weight: uniform(rng, &[hidden, cf], -0.5, 0.5),
        fc1_bias: uniform(rng, &[hidden], -0.5, 0.5),
        fc2_weight: uniform(rng, &[cf, hidden], -0.5, 0.5),
        fc2_bias: uniform(rng, &[cf], -0.5, 0.5),
    }
}

/// s = mean_t X; a = sigmoid(W2 relu(W1 s + b1) + b2); out = a * X.
pub fn ca_oracle(x: &Tensor, p: &CaParams) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (b, cf, t) = x.dims3().unwrap();
    let hidden = p.fc1_bias.len();
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for bi in 0..b {
        let s: Vec<f64> = (0..cf).map(|c| (0..t).map(|i| at(x, bi, c, i)).sum::<f64>() / t as f64).collect();
        let h: Vec<f64> = (0..hidden)
            .map(|j| {
                let z = p.fc1_bias.data()[j] + (0..cf).map(|c| p.fc1_weight.data()[j * cf + c] * s[c]).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        let a: Vec<f64> = (0..cf)
            .map(|c| {
                let z = p.fc2_bias.data()[c] + (0..hidden).map(|j| p.fc2_weight.data()[c * hidden + j] * h[j]).sum::<f64>();
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        out.push((0..cf).map(|c| (0..t).map(|i| a[c] * at(x, bi, c, i)).collect()).collect());
        weights.push(a);
    }
    (weights, out)
}


pub fn random_nta(rng: &mut ChaCha8Rng, cf: usize) -> NtaParams {
    let ce = cf / 2;
    NtaParams {
        theta: uniform(rng, &[ce, cf, 1], -0.7, 0.7),
        phi: uniform(rng, &[ce, cf, 1], -0.7, 0.7),
        g: uniform(rng, &[ce, cf, 1], -0.7, 0.7),
        w_out: uniform(rng, &[cf, ce, 1], -0.7, 0.7),
        bn: random_bn(rng, cf),
    }
}

/// Embedded-Gaussian non-local block written out index by index: theta,
/// phi, g projections; phi and g max-pooled in pairs; softmax over the
/// pooled positions; output projection, batch norm and residual.
pub fn nta_oracle(x: &Tensor, p: &NtaParams, train: bool) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let (b, cf, t) = x.dims3().unwrap();
    let ce = cf / 2;
    let proj = |w: &Tensor, bi: usize, e: usize, i: usize| (0..cf).map(|c| w.data()[e * cf + c] * at(x, bi, c, i)).sum::<f64>();
    let tp = if t >= 2 { t / 2 } else { t };
    let pooled = |w: &Tensor, bi: usize, e: usize, j: usize| {
        if t >= 2 {
            proj(w, bi, e, 2 * j).max(proj(w, bi, e, 2 * j + 1))
        } else {
            proj(w, bi, e, j)
        }
    };
    let mut attn = Vec::new();
    let mut z = Vec::new();
    for bi in 0..b {
        let mut a = vec![vec![0.0; tp]; t];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..ce).map(|e| proj(&p.theta, bi, e, i) * pooled(&p.phi, bi, e, j)).sum();
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - m).exp() / denom;
            }
        }
        let y: Vec<Vec<f64>> = (0..ce)
            .map(|e| (0..t).map(|i| (0..tp).map(|j| a[i][j] * pooled(&p.g, bi, e, j)).sum()).collect())
            .collect();
        z.push(
            (0..cf)
                .map(|c| (0..t).map(|i| (0..ce).map(|e| p.w_out.data()[c * ce + e] * y[e][i]).sum()).collect())
                .collect::<Vec<Vec<f64>>>(),
        );
        attn.push(a);
    }
    let mut out = bn_oracle(&z, &p.bn, train);
    for (bi, ob) in out.iter_mut().enumerate() {
        for (c, oc) in ob.iter_mut().enumerate() {
            for (i, v) in oc.iter_mut().enumerate() {
                *v += at(x, bi, c, i);
            }
        }
    }
    (attn, out)
}


/// Forward-backward magnitude of the bilinear Butterworth band-pass,
/// computed from its closed form on the prewarped frequency axis.
pub fn analytic_gain(spec: &FilterSpec, f: f64) -> f64 {
    let w = |hz: f64| (PI * hz / FS).tan();
    let (lo, hi, om) = (w(spec.low_cut), w(spec.high_cut), w(f));
    let x = (om * om - lo * hi) / ((hi - lo) * om);
    1.0 / (1.0 + x.powi(2 * spec.order as i32))
}

/// Amplitude of the `f` Hz component over `x[from..to]`, Hann-weighted so
/// slow edge transients of the high-pass section do not leak in.
pub fn tone_amplitude(x: &[f64], f: f64, from: usize, to: usize) -> f64 {
    let n = to - from;
    let (mut c, mut s, mut wsum) = (0.0, 0.0, 0.0);
    for (k, v) in x[from..to].iter().enumerate() {
        let w = 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos();
        let ph = 2.0 * PI * f * (from + k) as f64 / FS;
        c += w * v * ph.cos();
        s += w * v * ph.sin();
        wsum += w;
    }
    2.0 * (c * c + s * s).sqrt() / wsum
}

pub fn sine(f: f64, n: usize) -> Tensor {
    Tensor::from_fn(&[1, n], |i| (2.0 * PI * f * i as f64 / FS).sin())
}

