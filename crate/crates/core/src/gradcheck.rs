//! Central finite-difference check of every trainable tensor of the model
//! against the analytic gradient of the cross-entropy loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::recording::{AttentionClass, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::model::network::{build_forward, Mode};
use crate::model::params::{init_params, ModelConfig, ModelParams, NamedTensors, TensorKind};
use crate::tensor::Tensor;
use crate::train::fold::cross_entropy;

pub const BLOCKS: [&str; 5] = ["lfe", "ca", "nta", "hfe", "head"];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub time_steps: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: negate the analytic gradient of every tensor in this
    /// block before comparing.
    pub flip_sign: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            batch: 2,
            time_steps: 128,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            flip_sign: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)`.
    pub rel_error: f64,
    /// Entries whose central difference straddled a ReLU or max-pool
    /// switch and were re-measured with a ten times smaller step.
    pub kinks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub tensors: Vec<TensorCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failed_blocks(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.passed).map(|b| b.block.as_str()).collect()
    }
}

/// Relative error of two gradients measured in the max norm, with an
/// absolute floor so all-zero gradients compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf_norm(analytic).max(inf_norm(numeric)).max(1e-12)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn block_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn set_entry(params: &mut ModelParams, name: &str, index: usize, value: f64) {
    params.visit_mut("", &mut |n, t, _| {
        if n == name {
            t.data_mut()[index] = value;
        }
    });
}

/// Random `[B, 14, T]` input with labels cycling through the classes.
pub fn random_batch(batch: usize, time_steps: usize, seed: u64) -> (Tensor, Vec<AttentionClass>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[batch, NUM_CHANNELS, time_steps], |_| rng.sample(StandardNormal));
    let labels = (0..batch).map(|i| AttentionClass::ALL[i % AttentionClass::COUNT]).collect();
    (x, labels)
}

fn loss(params: &ModelParams, x: &Tensor, labels: &[AttentionClass]) -> Result<f64> {
    let pass = build_forward(params, x.clone(), Mode::Train, false)?;
    cross_entropy(pass.probs(), labels)
}

/// Check every trainable tensor of a freshly initialized model on one
/// random batch, with batch norm in training mode.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if let Some(b) = &cfg.flip_sign {
        if !BLOCKS.contains(&b.as_str()) {
            return Err(Error::invalid(format!("unknown block '{b}'; expected one of {BLOCKS:?}")));
        }
    }
    let params = init_params(cfg.seed, &cfg.model)?;
    let (x, labels) = random_batch(cfg.batch, cfg.time_steps, cfg.seed ^ 0x5EED);
    let codes: Vec<usize> = labels.iter().map(|l| l.code()).collect();

    let mut pass = build_forward(&params, x.clone(), Mode::Train, true)?;
    let probs = pass.nodes.probs;
    let l = pass.builder.graph.cross_entropy(probs, &codes)?;
    let grads = pass.builder.graph.backward(l)?;

    let mut work = params.clone();
    let mut blocks: Vec<BlockCheck> = BLOCKS
        .iter()
        .map(|b| BlockCheck {
            block: b.to_string(),
            max_rel_error: 0.0,
            passed: true,
            tensors: Vec::new(),
        })
        .collect();
    for (name, value, kind) in params.named() {
        if kind != TensorKind::Trainable {
            continue;
        }
        let block = block_of(&name);
        let mut analytic = grads
            .by_name(&name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; value.len()]);
        if cfg.flip_sign.as_deref() == Some(block) {
            analytic.iter_mut().for_each(|g| *g = -*g);
        }
        let central = |work: &mut ModelParams, i: usize, v: f64, h: f64| -> Result<f64> {
            set_entry(work, &name, i, v + h);
            let up = loss(work, &x, &labels)?;
            set_entry(work, &name, i, v - h);
            let down = loss(work, &x, &labels)?;
            set_entry(work, &name, i, v);
            Ok((up - down) / (2.0 * h))
        };
        let mut numeric = Vec::with_capacity(value.len());
        for (i, &v) in value.data().iter().enumerate() {
            numeric.push(central(&mut work, i, v, cfg.step)?);
        }
        // A piecewise-linear switch inside [v - h, v + h] makes the estimate
        // itself unreliable. Such points show up as a difference that moves
        // when the step shrinks; a stable disagreement is a real error.
        let scale = inf_norm(&analytic).max(inf_norm(&numeric)).max(1e-12);
        let mut kinks = 0;
        for (i, &v) in value.data().iter().enumerate() {
            if (analytic[i] - numeric[i]).abs() / scale < cfg.tolerance {
                continue;
            }
            let fine = central(&mut work, i, v, cfg.step / 10.0)?;
            if (fine - numeric[i]).abs() / scale >= cfg.tolerance {
                numeric[i] = fine;
                kinks += 1;
            }
        }
        let rel_error = relative_error(&analytic, &numeric);
        log::debug!("{name}: {} entries, relative error {rel_error:.3e}", value.len());
        let entry = blocks
            .iter_mut()
            .find(|b| b.block == block)
            .ok_or_else(|| Error::invalid(format!("tensor {name} belongs to no known block")))?;
        entry.max_rel_error = entry.max_rel_error.max(rel_error);
        entry.passed &= rel_error < cfg.tolerance;
        entry.tensors.push(TensorCheck {
            name,
            entries: value.len(),
            rel_error,
            kinks,
        });
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        blocks,
    })
}

/// One line per block, e.g. `nta  max_rel_error=3.1e-9  PASS`.
pub fn format_report(report: &GradcheckReport) -> String {
    let mut out = String::new();
    for b in &report.blocks {
        out.push_str(&format!(
            "{:<5} max_rel_error={:.3e}  {}\n",
            b.block,
            b.max_rel_error,
            if b.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}
