//! Fold aggregation and Welch's two-sample t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::train::fold::FoldResult;

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Bessel-corrected sample standard deviation.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Standard error of the mean.
pub fn standard_error(values: &[f64]) -> f64 {
    sample_sd(values) / (values.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub held_out_subject: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub per_fold: Vec<FoldSummary>,
}

pub fn aggregate_folds(results: &[FoldResult]) -> Result<Aggregate> {
    if results.len() < 2 {
        return Err(Error::invalid(format!("aggregation needs at least 2 folds, got {}", results.len())));
    }
    let acc: Vec<f64> = results.iter().map(|r| r.best_val_accuracy).collect();
    Ok(Aggregate {
        folds: results.len(),
        mean_accuracy: mean(&acc),
        sd_accuracy: sample_sd(&acc),
        per_fold: results
            .iter()
            .map(|r| FoldSummary {
                held_out_subject: r.held_out_subject.clone(),
                accuracy: r.best_val_accuracy,
            })
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Unequal-variance t-test of `mean(a) - mean(b)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each sample needs at least 2 values"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_sd(a).powi(2) / na, sample_sd(b).powi(2) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        // both samples constant
        return Ok(if diff == 0.0 {
            WelchTest { t: 0.0, df: f64::NAN, p: 1.0 }
        } else {
            WelchTest { t: diff.signum() * f64::INFINITY, df: f64::NAN, p: 0.0 }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(WelchTest { t, df, p })
}
