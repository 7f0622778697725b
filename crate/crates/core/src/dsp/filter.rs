//! Butterworth band-pass design and zero-phase (forward-backward) filtering.
//!
//! The design follows the classic analog-prototype route: Butterworth
//! low-pass poles, low-pass to band-pass transform, bilinear transform with
//! pre-warped band edges, then grouping into second-order sections.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Filter family. Only Butterworth is provided.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDesign {
    Butterworth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterSpec {
    pub low_cut: f64,
    pub high_cut: f64,
    /// Order of the low-pass prototype; the band-pass system has twice this.
    pub order: usize,
    pub design: FilterDesign,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            low_cut: 0.2,
            high_cut: 45.0,
            order: 4,
            design: FilterDesign::Butterworth,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if !(self.low_cut > 0.0 && self.low_cut < self.high_cut && self.high_cut < sample_rate / 2.0) {
            return Err(Error::invalid(format!(
                "band edges must satisfy 0 < low_cut < high_cut < {}; got {} .. {}",
                sample_rate / 2.0,
                self.low_cut,
                self.high_cut
            )));
        }
        if self.order == 0 {
            return Err(Error::invalid("filter order must be at least 1"));
        }
        Ok(())
    }

    /// Number of samples reflected onto each end before forward-backward
    /// filtering: three times the band-pass system order.
    pub fn pad_len(&self) -> usize {
        3 * 2 * self.order
    }
}

/// One biquad: `b0 b1 b2` numerator and `1 a1 a2` denominator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// A filter as a cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Design a band-pass filter for the given sample rate.
    pub fn bandpass(spec: &FilterSpec, sample_rate: f64) -> Result<Self> {
        spec.validate(sample_rate)?;
        let n = spec.order;

        // Butterworth analog prototype, cutoff 1 rad/s.
        let proto: Vec<Complex64> = (0..n)
            .map(|k| {
                let m = -(n as f64) + 1.0 + 2.0 * k as f64;
                -Complex64::from_polar(1.0, PI * m / (2.0 * n as f64))
            })
            .collect();

        // Pre-warp band edges for a bilinear transform with fs = 2.
        let fs2 = 4.0;
        let warp = |f: f64| fs2 * (PI * f / sample_rate).tan();
        let (w1, w2) = (warp(spec.low_cut), warp(spec.high_cut));
        let bw = w2 - w1;
        let w0 = (w1 * w2).sqrt();

        // Low-pass to band-pass: each prototype pole splits in two and n zeros
        // land at the origin.
        let mut poles = Vec::with_capacity(2 * n);
        for p in &proto {
            let lp = p * bw / 2.0;
            let root = (lp * lp - w0 * w0).sqrt();
            poles.push(lp + root);
            poles.push(lp - root);
        }
        let mut gain = bw.powi(n as i32);

        // Bilinear transform. Zeros at s = 0 map to z = 1; the n zeros at
        // infinity map to z = -1.
        let mut num = Complex64::new(1.0, 0.0);
        for _ in 0..n {
            num *= fs2;
        }
        let den: Complex64 = poles.iter().map(|p| fs2 - p).product();
        gain *= (num / den).re;
        let zpoles: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();

        let sections = pair_poles(&zpoles)?
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                let k = if i == 0 { gain } else { 1.0 };
                Biquad {
                    b: [k, 0.0, -k],
                    a,
                }
            })
            .collect();
        Ok(Self { sections })
    }

    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64, sample_rate: f64) -> Complex64 {
        let w = 2.0 * PI * freq / sample_rate;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| (s.b[0] + s.b[1] * z1 + s.b[2] * z2) / (s.a[0] + s.a[1] * z1 + s.a[2] * z2))
            .product()
    }

    /// Steady-state section states for a unit step input.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let g = s.b.iter().sum::<f64>() / s.a.iter().sum::<f64>();
                let z1 = s.b[2] - s.a[2] * g;
                let z0 = s.b[1] - s.a[1] * g + z1;
                let st = [z0 * scale, z1 * scale];
                scale *= g;
                st
            })
            .collect()
    }

    /// Causal filtering (direct form II transposed) starting from `state`.
    fn run(&self, x: &mut [f64], state: &mut [[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z[0];
                z[0] = b1 * xin - a1 * y + z[1];
                z[1] = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Zero-phase filtering of one channel with odd-reflection padding of
    /// `pad` samples on each end.
    pub fn filtfilt(&self, signal: &[f64], pad: usize) -> Result<Vec<f64>> {
        let n = signal.len();
        if n <= pad {
            return Err(Error::invalid(format!(
                "signal of {n} samples is too short for zero-phase filtering; need more than {pad}"
            )));
        }
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (signal[0], signal[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
        ext.extend_from_slice(signal);
        ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

        let zi = self.step_state();
        let scaled = |x0: f64| zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect::<Vec<_>>();

        let mut state = scaled(ext[0]);
        self.run(&mut ext, &mut state);
        ext.reverse();
        let mut state = scaled(ext[0]);
        self.run(&mut ext, &mut state);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

/// Group digital poles into denominators `[1, a1, a2]`: conjugate pairs
/// first, then any real poles two at a time.
fn pair_poles(poles: &[Complex64]) -> Result<Vec<[f64; 3]>> {
    const IMAG_TOL: f64 = 1e-12;
    let mut out = Vec::new();
    let mut reals = Vec::new();
    for p in poles {
        if p.im > IMAG_TOL {
            out.push([1.0, -2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= IMAG_TOL {
            reals.push(p.re);
        }
    }
    if reals.len() % 2 != 0 {
        return Err(Error::invalid("filter design produced an unpaired real pole"));
    }
    for pair in reals.chunks(2) {
        out.push([1.0, -(pair[0] + pair[1]), pair[0] * pair[1]]);
    }
    if 2 * out.len() != poles.len() {
        return Err(Error::invalid("filter design produced unbalanced conjugate poles"));
    }
    Ok(out)
}

/// Zero-phase band-pass filter every channel (row) of a `[C, N]` signal
/// independently.
pub fn bandpass_filter(signal: &Tensor, spec: &FilterSpec, sample_rate: f64) -> Result<Tensor> {
    let (c, n) = signal.dims2()?;
    let pad = spec.pad_len();
    if n <= pad {
        return Err(Error::invalid(format!(
            "segment of {n} samples is too short to filter; at least {} required",
            pad + 1
        )));
    }
    let sos = Sos::bandpass(spec, sample_rate)?;
    let mut out = Vec::with_capacity(c * n);
    for row in signal.data().chunks(n) {
        out.extend(sos.filtfilt(row, pad)?);
    }
    Tensor::new(vec![c, n], out)
}
