//! Fixtures shared by the benchmarks.

use attentionet::dsp::{NUM_CHANNELS, SAMPLE_RATE};
use attentionet::Tensor;

/// `seconds` of 14-channel sinusoid mixture at the device rate.
pub fn recording(seconds: usize) -> Tensor {
    let n = seconds * SAMPLE_RATE;
    Tensor::from_fn(&[NUM_CHANNELS, n], |i| {
        let (ch, t) = (i / n, (i % n) as f64 / SAMPLE_RATE as f64);
        let f = 4.0 + 2.5 * ch as f64;
        20.0 * (std::f64::consts::TAU * f * t).sin() + 5.0 * (std::f64::consts::TAU * 50.0 * t).cos()
    })
}

/// Deterministic pseudo-random tensor in [-1, 1).
pub fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}
