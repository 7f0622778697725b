use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Learnable affine parameters and running statistics of a 1-D batch
/// normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

/// Statistics of one training-mode batch, to be folded into the running
/// averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (Bessel-corrected) variance.
    pub var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalize `input` (`[B, C, T]`). Training mode uses batch statistics
    /// and updates the running averages; evaluation mode uses the running
    /// averages.
    pub fn forward(&mut self, input: &Tensor, training: bool) -> Result<Tensor> {
        if training {
            let (out, stats) = self.forward_train(input)?;
            self.update_running(&stats);
            Ok(out)
        } else {
            self.forward_eval(input)
        }
    }

    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        let (out, _, _) = ops::batchnorm_apply(
            input,
            self.running_mean.data(),
            self.running_var.data(),
            self.gamma.data(),
            self.beta.data(),
            self.eps,
        )?;
        Ok(out)
    }

    /// Training-mode normalization without touching the running averages.
    pub fn forward_train(&self, input: &Tensor) -> Result<(Tensor, BatchStats)> {
        let (b, _, t) = input.dims3()?;
        check_train_batch(b, t)?;
        let (mean, var) = ops::channel_stats(input)?;
        let (out, _, _) = ops::batchnorm_apply(
            input,
            &mean,
            &var,
            self.gamma.data(),
            self.beta.data(),
            self.eps,
        )?;
        Ok((out, BatchStats::from_biased(mean, var, b * t)))
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

impl BatchStats {
    pub(crate) fn from_biased(mean: Vec<f64>, var: Vec<f64>, count: usize) -> Self {
        let bessel = count as f64 / (count as f64 - 1.0);
        Self {
            mean,
            var: var.into_iter().map(|v| v * bessel).collect(),
        }
    }
}

pub(crate) fn check_train_batch(batch: usize, time: usize) -> Result<()> {
    if batch * time < 2 {
        return Err(Error::invalid(format!(
            "training-mode batch normalization needs at least 2 values per channel, got batch {batch} x time {time}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 4, 10], |_| rng.random_range(-2.0..5.0))
    }

    #[test]
    fn training_output_is_standardized() {
        let mut bn = BatchNormState::new(4);
        let y = bn.forward(&random_input(1), true).unwrap();
        let (b, c, t) = y.dims3().unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b)
                .flat_map(|bi| y.data()[(bi * c + ch) * t..(bi * c + ch + 1) * t].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            // eps shrinks the variance very slightly below one
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut bn = BatchNormState::new(4);
        bn.gamma = Tensor::zeros(&[4]);
        bn.beta = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        let y = bn.forward(&random_input(2), true).unwrap();
        let (_, c, t) = y.dims3().unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, bn.beta.data()[(i / t) % c]);
        }
    }

    /// Two-pass mean/variance computed independently of `ops::channel_stats`.
    #[test]
    fn matches_two_pass_formula() {
        let x = random_input(3);
        let mut bn = BatchNormState::new(4);
        bn.gamma = Tensor::from_vec(vec![1.5, -0.3, 0.7, 2.0]);
        bn.beta = Tensor::from_vec(vec![0.1, 0.2, -0.3, 0.0]);
        let y = bn.forward(&x, true).unwrap();
        let (b, c, t) = x.dims3().unwrap();
        for ch in 0..c {
            let mut vals = Vec::new();
            for bi in 0..b {
                for ti in 0..t {
                    vals.push(x.data()[(bi * c + ch) * t + ti]);
                }
            }
            let n = vals.len() as f64;
            let mu = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            for bi in 0..b {
                for ti in 0..t {
                    let i = (bi * c + ch) * t + ti;
                    let expect = (x.data()[i] - mu) / (var + 1e-5).sqrt() * bn.gamma.data()[ch]
                        + bn.beta.data()[ch];
                    assert!((y.data()[i] - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn running_stats_track_batch() {
        let x = random_input(4);
        let mut bn = BatchNormState::new(4);
        bn.forward(&x, true).unwrap();
        let (mean, _) = ops::channel_stats(&x).unwrap();
        for (r, m) in bn.running_mean.data().iter().zip(&mean) {
            assert!((r - 0.1 * m).abs() < 1e-12);
        }
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_single_value_batches() {
        let mut bn = BatchNormState::new(2);
        assert!(bn.forward(&Tensor::zeros(&[1, 2, 1]), true).is_err());
        assert!(bn.forward(&Tensor::zeros(&[1, 2, 1]), false).is_ok());
    }
}
