//! Adam and the plateau learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::model::params::{ModelParams, NamedTensors, TensorKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable tensor. Tensors without
    /// a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = grads.named().collect();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut err = None;
        let moments = &mut self.moments;
        params.visit_mut("", &mut |name, p, kind| {
            if kind != TensorKind::Trainable || err.is_some() {
                return;
            }
            let g = by_name.get(name.as_str()).copied();
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    err = Some(Error::shape(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                    return;
                }
            }
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let gd = g.map(|g| g.data());
            for i in 0..p.len() {
                let gi = gd.map_or(0.0, |d| d[i]);
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let mhat = *mi / c1;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let vhat = *vi / c2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Divide the learning rate when validation loss stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub min_delta: f64,
    pub factor: f64,
    pub max_decays: usize,
    pub min_lr: f64,
    lr: f64,
    best: f64,
    stale: usize,
    decays: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, min_delta: f64, factor: f64, max_decays: usize, min_lr: f64) -> Self {
        Self {
            patience,
            min_delta,
            factor,
            max_decays,
            min_lr,
            lr,
            best: f64::INFINITY,
            stale: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    /// Record one epoch's validation loss. Returns the new rate if it was
    /// decayed.
    pub fn observe(&mut self, val_loss: f64) -> Option<f64> {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stale = 0;
            return None;
        }
        self.stale += 1;
        if self.stale >= self.patience && self.decays < self.max_decays {
            self.lr = (self.lr / self.factor).max(self.min_lr);
            self.decays += 1;
            self.stale = 0;
            return Some(self.lr);
        }
        None
    }
}

/// Learning rate after replaying a whole validation-loss history.
pub fn plateau_lr(history: &[f64], patience: usize, min_delta: f64, lr: f64) -> f64 {
    let mut s = PlateauScheduler::new(lr, patience, min_delta, 10.0, 2, 1e-5);
    for &l in history {
        s.observe(l);
    }
    s.lr()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_losses_keep_rate() {
        let h: Vec<f64> = (0..30).map(|i| 1.0 - 0.01 * i as f64).collect();
        assert_eq!(plateau_lr(&h, 5, 1e-4, 1e-3), 1e-3);
    }

    #[test]
    fn stagnation_decays_by_ten() {
        // first epoch sets the reference; five more without improvement
        let h = [1.0; 6];
        assert!((plateau_lr(&h, 5, 1e-4, 1e-3) - 1e-4).abs() < 1e-18);
        assert_eq!(plateau_lr(&h[..5], 5, 1e-4, 1e-3), 1e-3);
    }

    #[test]
    fn at_most_two_decays() {
        let h = [1.0; 60];
        assert!((plateau_lr(&h, 5, 1e-4, 1e-3) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn improvement_below_min_delta_is_stagnation() {
        let h = [1.0, 0.99995, 0.99992, 0.99994, 0.99991, 0.99993];
        assert!(plateau_lr(&h, 5, 1e-4, 1e-3) < 1e-3);
    }
}
