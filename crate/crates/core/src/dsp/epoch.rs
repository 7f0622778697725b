//! Sliding-window epoching and per-window normalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One second at 128 Hz.
pub const WINDOW_SAMPLES: usize = 128;
/// 250 ms hop, i.e. 750 ms overlap between consecutive windows.
pub const WINDOW_STRIDE: usize = 32;

/// Number of full windows of length `window` at hop `stride` in `n` samples.
pub fn window_count(n: usize, window: usize, stride: usize) -> usize {
    if n < window || stride == 0 {
        0
    } else {
        (n - window) / stride + 1
    }
}

/// Start offsets of every full window.
pub fn window_offsets(n: usize, window: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..window_count(n, window, stride)).map(move |i| i * stride)
}

/// Cut a `[C, N]` segment into `[C, window]` slices starting at offsets
/// `0, stride, 2*stride, ...`. A segment shorter than one window yields no
/// windows.
pub fn epoch_segment(segment: &Tensor, window: usize, stride: usize) -> Result<Vec<Tensor>> {
    let (c, n) = segment.dims2()?;
    if stride == 0 || window == 0 {
        return Err(Error::invalid("window and stride must be at least 1"));
    }
    if n < window {
        log::warn!("segment of {n} samples is shorter than one {window}-sample window; skipped");
        return Ok(Vec::new());
    }
    let data = segment.data();
    window_offsets(n, window, stride)
        .map(|off| {
            let mut w = Vec::with_capacity(c * window);
            for ch in 0..c {
                w.extend_from_slice(&data[ch * n + off..ch * n + off + window]);
            }
            Tensor::new(vec![c, window], w)
        })
        .collect()
}

/// Per-channel z-score within a `[C, T]` window. Constant channels map to
/// zeros.
pub fn normalize_window(window: &Tensor) -> Result<Tensor> {
    let (_, t) = window.dims2()?;
    let mut out = window.data().to_vec();
    for row in out.chunks_mut(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            row.fill(0.0);
        } else {
            for v in row.iter_mut() {
                *v = (*v - mean) / std;
            }
        }
    }
    Tensor::new(window.shape().to_vec(), out)
}
