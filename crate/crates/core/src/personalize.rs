//! Fine-tuning a subject-independent model on a short calibration slice of
//! the target subject, and the accuracy-versus-calibration-data sweep.

use serde::{Deserialize, Serialize};

use crate::dsp::dataset::LabeledWindow;
use crate::dsp::epoch::{window_count, WINDOW_SAMPLES, WINDOW_STRIDE};
use crate::dsp::recording::{AttentionClass, SAMPLE_RATE};
use crate::error::{Error, Result, ResultExt};
use crate::model::params::ModelParams;
use crate::train::fold::{evaluate, fold_seed, shuffle_rng, train_epoch};
use crate::train::optim::Adam;
use crate::train::stats::{mean, standard_error};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Calibration seconds per class at each sweep point.
    pub schedule: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            schedule: vec![10, 20, 30],
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::invalid("schedule must list at least one point"));
        }
        if let Some(&s) = self.schedule.iter().find(|&&s| s == 0 || s % 10 != 0) {
            return Err(Error::invalid(format!("schedule entries must be positive multiples of 10 s, got {s}")));
        }
        if self.schedule.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::invalid("schedule must be strictly increasing"));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("learning_rate and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Windows per class obtained from `seconds` of contiguous signal.
pub fn windows_per_class(seconds: usize) -> usize {
    window_count(seconds * SAMPLE_RATE, WINDOW_SAMPLES, WINDOW_STRIDE)
}

#[derive(Clone, Debug)]
pub struct TuningSplit<'a> {
    pub tuning: Vec<&'a LabeledWindow>,
    pub evaluation: Vec<&'a LabeledWindow>,
}

/// Tune on the first `seconds` of each class's earliest segment; evaluate
/// on every window that shares no sample with that span.
pub fn select_tuning_slice(windows: &[LabeledWindow], seconds: usize) -> Result<TuningSplit<'_>> {
    split_subject(windows, seconds, seconds)
}

/// Like [`select_tuning_slice`], but windows overlapping the first
/// `reserve_seconds` of each class's earliest segment are withheld from
/// evaluation. Holding `reserve_seconds` fixed across a sweep keeps the
/// evaluation set identical at every point.
pub fn split_subject(windows: &[LabeledWindow], seconds: usize, reserve_seconds: usize) -> Result<TuningSplit<'_>> {
    if reserve_seconds < seconds {
        return Err(Error::invalid("reserved span must cover the tuning span"));
    }
    if let Some(w) = windows.iter().find(|w| w.subject_id != windows[0].subject_id) {
        return Err(Error::invalid(format!(
            "tuning slice expects one subject, found '{}' and '{}'",
            windows[0].subject_id, w.subject_id
        )));
    }
    let span = seconds * SAMPLE_RATE;
    let reserve = reserve_seconds * SAMPLE_RATE;
    let mut first_segment = [None; AttentionClass::COUNT];
    for class in AttentionClass::ALL {
        let mine = windows.iter().filter(|w| w.label == class);
        let Some(seg) = mine.clone().map(|w| w.segment).min() else {
            return Err(Error::invalid(format!("class {class} has no windows")));
        };
        let available = mine.filter(|w| w.segment == seg).map(|w| w.span().end).max().unwrap_or(0);
        if available <= reserve {
            return Err(Error::invalid(format!(
                "class {class} has {:.2} s of contiguous signal; more than {reserve_seconds} s required",
                available as f64 / SAMPLE_RATE as f64
            )));
        }
        first_segment[class.code()] = Some(seg);
    }
    let mut tuning = Vec::new();
    let mut evaluation = Vec::new();
    for w in windows {
        let in_first = first_segment[w.label.code()] == Some(w.segment);
        if in_first && w.span().end <= span {
            tuning.push(w);
        } else if !(in_first && w.offset < reserve) {
            evaluation.push(w);
        }
    }
    let expected = windows_per_class(seconds);
    for class in AttentionClass::ALL {
        let got = tuning.iter().filter(|w| w.label == class).count();
        if got != expected {
            return Err(Error::invalid(format!(
                "class {class}: {got} tuning windows, expected {expected}; windows are missing from the segment"
            )));
        }
    }
    check_disjoint(&tuning, &evaluation)?;
    Ok(TuningSplit { tuning, evaluation })
}

/// Fails if any evaluation window shares a raw sample with a tuning window.
pub fn check_disjoint(tuning: &[&LabeledWindow], evaluation: &[&LabeledWindow]) -> Result<()> {
    for e in evaluation {
        for t in tuning {
            if e.subject_id == t.subject_id
                && e.segment == t.segment
                && e.offset < t.span().end
                && t.offset < e.span().end
            {
                return Err(Error::invalid(format!(
                    "evaluation window at {} overlaps tuning window at {} in segment {}",
                    e.offset, t.offset, e.segment
                )));
            }
        }
    }
    Ok(())
}

/// Continue training every layer of `base` on `tuning`, with batch norm in
/// training mode and a fixed learning rate.
pub fn fine_tune(base: &ModelParams, tuning: &[&LabeledWindow], cfg: &FinetuneConfig) -> Result<ModelParams> {
    let mut params = base.clone();
    if cfg.epochs == 0 {
        return Ok(params);
    }
    if tuning.is_empty() {
        return Err(Error::invalid("fine-tuning set is empty"));
    }
    let mut adam = Adam::new();
    let mut rng = shuffle_rng(cfg.seed);
    for epoch in 1..=cfg.epochs {
        let (loss, acc) = train_epoch(&mut params, &mut adam, tuning, cfg.batch_size, cfg.learning_rate, &mut rng)
            .context(|| format!("fine-tune epoch {epoch}"))?;
        log::debug!("fine-tune epoch {epoch}: loss {loss:.4} acc {acc:.3}");
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub seconds_per_class: usize,
    pub windows_per_class: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectCurve {
    pub subject: String,
    /// Untuned base model on the same evaluation windows.
    pub base_accuracy: f64,
    pub evaluation_windows: usize,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryPoint {
    pub seconds_per_class: usize,
    pub windows_per_class: usize,
    pub mean_accuracy: f64,
    pub standard_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationCurve {
    pub subjects: Vec<SubjectCurve>,
    /// Base model, reported as the zero-seconds point.
    pub base: SummaryPoint,
    pub points: Vec<SummaryPoint>,
    /// Smallest schedule point whose mean lies within one standard error
    /// of the best mean.
    pub sufficient_seconds: usize,
}

/// Sweep one subject: evaluate the base model, then fine-tune a fresh copy
/// at each schedule point. All points share one evaluation set.
pub fn subject_curve(base: &ModelParams, windows: &[LabeledWindow], cfg: &FinetuneConfig) -> Result<SubjectCurve> {
    cfg.validate()?;
    let max = *cfg.schedule.last().expect("validated");
    let subject = windows
        .first()
        .map(|w| w.subject_id.clone())
        .ok_or_else(|| Error::invalid("subject has no windows"))?;
    let fixed = split_subject(windows, max, max)?;
    let base_accuracy = evaluate(base, &fixed.evaluation)?.accuracy;
    let mut points = Vec::new();
    for &s in &cfg.schedule {
        let split = split_subject(windows, s, max).context(|| format!("subject {subject}, {s} s per class"))?;
        debug_assert_eq!(split.evaluation.len(), fixed.evaluation.len());
        let tuned = fine_tune(base, &split.tuning, cfg)?;
        let acc = evaluate(&tuned, &split.evaluation)?.accuracy;
        log::info!("subject {subject}: {s} s per class -> accuracy {acc:.3} (base {base_accuracy:.3})");
        points.push(CurvePoint {
            seconds_per_class: s,
            windows_per_class: windows_per_class(s),
            accuracy: acc,
        });
    }
    Ok(SubjectCurve {
        subject,
        base_accuracy,
        evaluation_windows: fixed.evaluation.len(),
        points,
    })
}

/// Run [`subject_curve`] for every `(base model, subject windows)` pair and
/// summarize across subjects.
pub fn personalization_sweep(
    subjects: &[(&ModelParams, Vec<LabeledWindow>)],
    cfg: &FinetuneConfig,
    jobs: usize,
) -> Result<PersonalizationCurve> {
    cfg.validate()?;
    if subjects.is_empty() {
        return Err(Error::invalid("no subjects to personalize"));
    }
    let run = |(i, (base, windows)): (usize, &(&ModelParams, Vec<LabeledWindow>))| {
        let sub_cfg = FinetuneConfig {
            seed: fold_seed(cfg.seed, i),
            ..cfg.clone()
        };
        subject_curve(base, windows, &sub_cfg)
    };
    let curves: Vec<SubjectCurve> = if jobs <= 1 {
        subjects.iter().enumerate().map(run).collect::<Result<_>>()?
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| subjects.par_iter().enumerate().map(run).collect::<Result<_>>())?
    };
    summarize(curves)
}

pub fn summarize(curves: Vec<SubjectCurve>) -> Result<PersonalizationCurve> {
    let first = curves.first().ok_or_else(|| Error::invalid("no subject curves"))?;
    let schedule: Vec<usize> = first.points.iter().map(|p| p.seconds_per_class).collect();
    let summary = |seconds: usize, acc: Vec<f64>| SummaryPoint {
        seconds_per_class: seconds,
        windows_per_class: windows_per_class(seconds),
        mean_accuracy: mean(&acc),
        standard_error: standard_error(&acc),
    };
    let base = summary(0, curves.iter().map(|c| c.base_accuracy).collect());
    let mut points = Vec::new();
    for (k, &s) in schedule.iter().enumerate() {
        let acc = curves
            .iter()
            .map(|c| match c.points.get(k) {
                Some(p) if p.seconds_per_class == s => Ok(p.accuracy),
                _ => Err(Error::invalid(format!("subject {} lacks the {s} s point", c.subject))),
            })
            .collect::<Result<Vec<f64>>>()?;
        points.push(summary(s, acc));
    }
    let sufficient_seconds = sufficient_point(&points);
    Ok(PersonalizationCurve {
        subjects: curves,
        base,
        points,
        sufficient_seconds,
    })
}

/// Smallest point whose mean is within one standard error of the maximum
/// mean, the standard error being that of the maximizing point.
pub fn sufficient_point(points: &[SummaryPoint]) -> usize {
    let Some(best) = points
        .iter()
        .max_by(|a, b| a.mean_accuracy.total_cmp(&b.mean_accuracy))
    else {
        return 0;
    };
    points
        .iter()
        .find(|p| p.mean_accuracy >= best.mean_accuracy - best.standard_error)
        .map_or(best.seconds_per_class, |p| p.seconds_per_class)
}

/// Per-subject rows, base model first as the zero-seconds point.
pub fn format_curve_tsv(curve: &PersonalizationCurve) -> String {
    let mut out = String::from("subject\tseconds_per_class\twindows_per_class\taccuracy\n");
    for c in &curve.subjects {
        out.push_str(&format!("{}\t0\t0\t{:?}\n", c.subject, c.base_accuracy));
        for p in &c.points {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:?}\n",
                c.subject, p.seconds_per_class, p.windows_per_class, p.accuracy
            ));
        }
    }
    out
}

/// Mean and standard error per point, with the sufficient point flagged.
pub fn format_summary_tsv(curve: &PersonalizationCurve) -> String {
    let mut out = String::from("seconds_per_class\twindows_per_class\tmean_accuracy\tstandard_error\tsufficient\n");
    for p in std::iter::once(&curve.base).chain(&curve.points) {
        let flag = p.seconds_per_class > 0 && p.seconds_per_class == curve.sufficient_seconds;
        out.push_str(&format!(
            "{}\t{}\t{:?}\t{:?}\t{}\n",
            p.seconds_per_class, p.windows_per_class, p.mean_accuracy, p.standard_error, flag as u8
        ));
    }
    out
}

/// Parse a per-subject curve table back into `(subject, seconds, windows,
/// accuracy)` rows.
pub fn parse_curve_tsv(text: &str) -> Result<Vec<(String, usize, usize, f64)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Format {
            path: "curve".into(),
            line: i + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(&format!("expected 4 columns, found {}", f.len())));
        }
        rows.push((
            f[0].to_string(),
            f[1].parse().map_err(|_| bad("bad seconds_per_class"))?,
            f[2].parse().map_err(|_| bad("bad windows_per_class"))?,
            f[3].parse().map_err(|_| bad("bad accuracy"))?,
        ));
    }
    Ok(rows)
}
