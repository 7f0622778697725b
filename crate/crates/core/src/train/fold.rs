//! Mini-batch training, evaluation and leave-one-subject-out folds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::dataset::{batch_tensor, subjects, LabeledWindow};
use crate::dsp::recording::AttentionClass;
use crate::error::{Error, Result, ResultExt};
use crate::model::network::{build_forward, predict_proba, Mode};
use crate::model::params::{init_params, ModelConfig, ModelParams};
use crate::ops::argmax;
use crate::tensor::Tensor;
use crate::train::optim::{Adam, PlateauScheduler};

/// Probability floor applied before taking logs.
pub use crate::graph::PROB_FLOOR;

const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub decay_factor: f64,
    pub max_decays: usize,
    pub min_learning_rate: f64,
    /// Stop after this many epochs without a validation-accuracy gain.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            plateau_patience: 5,
            plateau_min_delta: 1e-4,
            decay_factor: 10.0,
            max_decays: 2,
            min_learning_rate: 1e-5,
            early_stop_patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.decay_factor > 1.0) {
            return Err(Error::invalid(format!("decay_factor must exceed 1, got {}", self.decay_factor)));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("patience values must be at least 1"));
        }
        Ok(())
    }
}

/// Mean of `-ln p[label]` over the batch with `p` clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Tensor, labels: &[AttentionClass]) -> Result<f64> {
    let (b, k) = probs.dims2()?;
    if labels.len() != b || b == 0 {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut total = 0.0;
    for (row, label) in probs.data().chunks(k).zip(labels) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("probability row sums to {s}")));
        }
        let l = label.code();
        if l >= k {
            return Err(Error::invalid(format!("label {l} outside 0..{k}")));
        }
        total -= row[l].max(PROB_FLOOR).ln();
    }
    Ok(total / b as f64)
}

/// Accuracy, confusion matrix (rows = true class) and mean loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub mean_loss: f64,
}

impl Evaluation {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn from_probs(probs: &Tensor, labels: &[AttentionClass]) -> Result<Self> {
        let k = AttentionClass::COUNT;
        let mut confusion = vec![vec![0u64; k]; k];
        for (row, l) in probs.data().chunks(k).zip(labels) {
            confusion[l.code()][argmax(row)] += 1;
        }
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            confusion,
            mean_loss: cross_entropy(probs, labels)?,
        })
    }
}

/// Eval-mode predictions over `windows`, processed in fixed-size chunks.
pub fn predict_windows(params: &ModelParams, windows: &[&LabeledWindow]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(windows.len() * AttentionClass::COUNT);
    for chunk in windows.chunks(EVAL_CHUNK) {
        let x = batch_tensor(chunk.iter().copied())?;
        data.extend_from_slice(predict_proba(params, &x)?.data());
    }
    Tensor::new(vec![windows.len(), AttentionClass::COUNT], data)
}

pub fn evaluate(params: &ModelParams, windows: &[&LabeledWindow]) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty window set"));
    }
    let probs = predict_windows(params, windows)?;
    let labels: Vec<AttentionClass> = windows.iter().map(|w| w.label).collect();
    Evaluation::from_probs(&probs, &labels)
}

/// Loss and number of correct predictions for one optimizer step.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    batch: &[&LabeledWindow],
    lr: f64,
) -> Result<(f64, usize)> {
    let x = batch_tensor(batch.iter().copied())?;
    let labels: Vec<usize> = batch.iter().map(|w| w.label.code()).collect();
    let mut pass = build_forward(params, x, Mode::Train, true)?;
    let probs = pass.nodes.probs;
    let loss = pass.builder.graph.cross_entropy(probs, &labels)?;
    let loss_value = pass.builder.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::invalid(format!("non-finite training loss {loss_value}")));
    }
    let correct = pass
        .probs()
        .data()
        .chunks(AttentionClass::COUNT)
        .zip(&labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let grads = pass.builder.graph.backward(loss)?;
    let updates = pass.builder.take_bn_updates();
    adam.step(params, &grads, lr)?;
    params.apply_bn_updates(&updates)?;
    Ok((loss_value, correct))
}

/// One pass over `windows` in a seeded random order. Returns mean loss and
/// accuracy; the final short batch is kept.
pub fn train_epoch(
    params: &mut ModelParams,
    adam: &mut Adam,
    windows: &[&LabeledWindow],
    batch_size: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (bi, idx) in order.chunks(batch_size).enumerate() {
        let batch: Vec<&LabeledWindow> = idx.iter().map(|&i| windows[i]).collect();
        let (loss, c) =
            train_step(params, adam, &batch, lr).context(|| format!("batch {bi}"))?;
        loss_sum += loss * batch.len() as f64;
        correct += c;
    }
    let n = windows.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

pub(crate) fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// One train/validation split.
#[derive(Clone, Debug)]
pub struct Fold<'a> {
    pub held_out: String,
    pub train: Vec<&'a LabeledWindow>,
    pub validation: Vec<&'a LabeledWindow>,
}

/// One fold per subject, in first-appearance order.
pub fn loso_split(dataset: &[LabeledWindow]) -> Result<Vec<Fold<'_>>> {
    let ids = subjects(dataset);
    if ids.len() < 2 {
        return Err(Error::invalid(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            ids.len()
        )));
    }
    Ok(ids
        .into_iter()
        .map(|id| {
            let (validation, train) = dataset.iter().partition(|w| w.subject_id == id);
            Fold {
                held_out: id,
                train,
                validation,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrEvent {
    /// Epoch after which the new rate takes effect.
    pub epoch: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub held_out_subject: String,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the retained checkpoint.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Validation confusion matrix of the retained checkpoint.
    pub confusion: Vec<Vec<u64>>,
    pub lr_events: Vec<LrEvent>,
}

/// A fold's metrics together with its best checkpoint.
#[derive(Clone, Debug)]
pub struct TrainedFold {
    pub result: FoldResult,
    pub params: ModelParams,
}

/// Train from a fresh initialization, keeping the checkpoint with the best
/// validation accuracy (earliest on ties).
pub fn train_fold(fold: &Fold<'_>, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainedFold> {
    cfg.validate()?;
    if fold.train.is_empty() || fold.validation.is_empty() {
        return Err(Error::invalid(format!("fold '{}' has an empty side", fold.held_out)));
    }
    if fold.train.iter().any(|w| w.subject_id == fold.held_out) {
        return Err(Error::invalid(format!(
            "training set of fold '{}' contains the held-out subject",
            fold.held_out
        )));
    }
    let mut params = init_params(cfg.seed, model)?;
    let mut adam = Adam::new();
    let mut rng = shuffle_rng(cfg.seed);
    let mut sched = PlateauScheduler::new(
        cfg.learning_rate,
        cfg.plateau_patience,
        cfg.plateau_min_delta,
        cfg.decay_factor,
        cfg.max_decays,
        cfg.min_learning_rate,
    );
    let mut epochs = Vec::new();
    let mut lr_events = Vec::new();
    let mut best: Option<(usize, Evaluation, ModelParams)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        let (train_loss, train_accuracy) =
            train_epoch(&mut params, &mut adam, &fold.train, cfg.batch_size, lr, &mut rng)
                .context(|| format!("fold '{}' epoch {epoch}", fold.held_out))?;
        let eval = evaluate(&params, &fold.validation)?;
        log::info!(
            "fold {} epoch {epoch}: loss {train_loss:.4} acc {train_accuracy:.3} | val loss {:.4} acc {:.3}",
            fold.held_out,
            eval.mean_loss,
            eval.accuracy
        );
        epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            train_accuracy,
            val_loss: eval.mean_loss,
            val_accuracy: eval.accuracy,
        });
        if let Some(new_lr) = sched.observe(eval.mean_loss) {
            lr_events.push(LrEvent {
                epoch,
                learning_rate: new_lr,
            });
        }
        if best.as_ref().is_none_or(|(_, b, _)| eval.accuracy > b.accuracy) {
            best = Some((epoch, eval, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (best_epoch, eval, params) =
        best.ok_or_else(|| Error::invalid("max_epochs must be at least 1"))?;
    Ok(TrainedFold {
        result: FoldResult {
            held_out_subject: fold.held_out.clone(),
            epochs,
            best_epoch,
            best_val_accuracy: eval.accuracy,
            confusion: eval.confusion,
            lr_events,
        },
        params,
    })
}

/// Seed for fold `index`, decorrelated from neighbouring folds.
pub fn fold_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Train every LOSO fold. `jobs > 1` runs folds concurrently; results are
/// returned in fold order and do not depend on `jobs`.
pub fn run_loso(
    dataset: &[LabeledWindow],
    model: &ModelConfig,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Vec<TrainedFold>> {
    let folds = loso_split(dataset)?;
    let run = |(i, fold): (usize, &Fold<'_>)| {
        let fold_cfg = TrainConfig {
            seed: fold_seed(cfg.seed, i),
            ..cfg.clone()
        };
        train_fold(fold, model, &fold_cfg)
    };
    if jobs <= 1 {
        return folds.iter().enumerate().map(run).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| folds.par_iter().enumerate().map(run).collect())
}
