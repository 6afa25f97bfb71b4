//! Task metrics, uncertainty quality, calibration and deferral curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{argmax, Task};
use crate::error::{Error, Result};
use crate::losses::{pearson, Correlation};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub mae: Option<f64>,
    pub corr: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
}

/// Per-row predicted class (classification) or value (regression).
pub fn point_predictions(task: Task, scores: &Tensor) -> Vec<f64> {
    (0..scores.rows())
        .map(|r| match task {
            Task::Regression => scores.get(r, 0),
            Task::Classification { .. } => argmax(scores.row(r)) as f64,
        })
        .collect()
}

pub fn task_metrics(task: Task, scores: &Tensor, labels: &Tensor) -> Result<TaskMetrics> {
    if scores.shape() != labels.shape() || scores.cols() != task.output_dim() {
        return Err(Error::Contract(format!(
            "scores {:?} and labels {:?} do not align for {task:?}",
            scores.shape(),
            labels.shape()
        )));
    }
    let n = scores.rows();
    match task {
        Task::Regression => {
            let (p, y) = (scores.data(), labels.data());
            let mae = p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
            let corr = if n >= 2 {
                let c = pearson(p, y)?;
                (!c.degenerate).then_some(c.r)
            } else {
                None
            };
            Ok(TaskMetrics {
                mae: Some(mae),
                corr,
                ..TaskMetrics::default()
            })
        }
        Task::Classification { classes } => {
            let pred: Vec<usize> = (0..n).map(|r| argmax(scores.row(r))).collect();
            let truth: Vec<usize> = (0..n).map(|r| argmax(labels.row(r))).collect();
            Ok(TaskMetrics {
                accuracy: Some(accuracy(&pred, &truth)),
                macro_f1: Some(macro_f1(&pred, &truth, classes)),
                ..TaskMetrics::default()
            })
        }
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

/// Unweighted mean of per-class F1; a class with no true or predicted
/// members contributes 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let per_class = (0..classes).map(|c| {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = truth.iter().filter(|&&t| t == c).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            let (precision, recall) = (tp / predicted, tp / actual);
            2.0 * precision * recall / (precision + recall)
        }
    });
    per_class.sum::<f64>() / classes as f64
}

pub fn uncertainty_corr(variance: &[f64], errors: &[f64]) -> Result<Correlation> {
    pearson(variance, errors)
}

/// Location and spread of training errors and training variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub error_mean: f64,
    pub error_std: f64,
    pub variance_mean: f64,
    pub variance_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

impl CalibrationStats {
    pub fn fit(variance: &[f64], errors: &[f64]) -> Result<Self> {
        if variance.len() != errors.len() || variance.len() < 2 {
            return Err(Error::BatchTooSmall {
                op: "calibration_stats",
                len: variance.len().min(errors.len()),
                min: 2,
            });
        }
        let (error_mean, error_std) = mean_std(errors);
        let (variance_mean, variance_std) = mean_std(variance);
        Ok(Self {
            error_mean,
            error_std,
            variance_mean,
            variance_std,
        })
    }
}

/// Affine map of variances onto the training-error scale, clipped at 0.
pub fn calibrate(variance: &[f64], stats: &CalibrationStats) -> Result<Vec<f64>> {
    if stats.variance_std.is_nan() || stats.variance_std <= 0.0 {
        return Err(Error::Degenerate("calibrate: training variances have no spread"));
    }
    let slope = stats.error_std / stats.variance_std;
    Ok(variance
        .iter()
        .map(|v| (stats.error_mean + slope * (v - stats.variance_mean)).max(0.0))
        .collect())
}

/// Equal-width binning over the variance range; the sample-weighted mean
/// absolute gap between average error and average variance per bin.
pub fn uce(variance: &[f64], errors: &[f64], bins: usize) -> Result<f64> {
    if variance.len() != errors.len() {
        return Err(Error::Contract("uce: lengths differ".into()));
    }
    if bins == 0 || variance.len() < bins {
        return Err(Error::BatchTooSmall {
            op: "uce",
            len: variance.len(),
            min: bins.max(1),
        });
    }
    let lo = variance.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = variance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut sum_v = vec![0.0; bins];
    let mut sum_e = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&v, &e) in variance.iter().zip(errors) {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        sum_v[b] += v;
        sum_e[b] += e;
        count[b] += 1;
    }
    let n = variance.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (sum_e[b] / c - sum_v[b] / c).abs()
        })
        .sum())
}

/// One point of a deferral curve. Recall-style rates are normalized by the
/// incorrect and correct populations; precision-style rates by the deferred
/// set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeferralRow {
    pub quantile: f64,
    pub threshold: f64,
    pub deferred_frac: f64,
    pub retained_acc: Option<f64>,
    pub tdr_recall: Option<f64>,
    pub fdr_recall: Option<f64>,
    pub tdr_precision: Option<f64>,
    pub fdr_precision: Option<f64>,
}

/// Linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Defers every sample whose variance exceeds the `q`-quantile threshold.
pub fn deferral_analysis(variance: &[f64], correct: &[bool], quantiles: &[f64]) -> Result<Vec<DeferralRow>> {
    if variance.len() != correct.len() || variance.is_empty() {
        return Err(Error::Contract("deferral: lengths differ or empty".into()));
    }
    if let Some(q) = quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        return Err(Error::InvalidConfig(format!("deferral quantile {q} outside (0, 1)")));
    }
    let n = variance.len();
    let incorrect_total = correct.iter().filter(|c| !**c).count();
    let correct_total = n - incorrect_total;
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(quantiles
        .iter()
        .map(|&q| {
            let threshold = quantile(variance, q);
            let deferred: Vec<bool> = variance.iter().map(|&v| v > threshold).collect();
            let n_def = deferred.iter().filter(|d| **d).count();
            let def_wrong = deferred.iter().zip(correct).filter(|(d, c)| **d && !**c).count();
            let def_right = n_def - def_wrong;
            let kept_right = correct_total - def_right;
            let tdr_precision = ratio(def_wrong, n_def);
            DeferralRow {
                quantile: q,
                threshold,
                deferred_frac: n_def as f64 / n as f64,
                retained_acc: ratio(kept_right, n - n_def),
                tdr_recall: ratio(def_wrong, incorrect_total),
                fdr_recall: ratio(def_right, correct_total),
                tdr_precision,
                fdr_precision: tdr_precision.map(|t| 1.0 - t),
            }
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_deferral_csv(path: &Path, rows: &[DeferralRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "quantile",
        "threshold",
        "deferred_frac",
        "retained_acc",
        "tdr_recall",
        "fdr_recall",
        "tdr_precision",
        "fdr_precision",
    ])?;
    for r in rows {
        w.write_record([
            r.quantile.to_string(),
            r.threshold.to_string(),
            r.deferred_frac.to_string(),
            opt(r.retained_acc),
            opt(r.tdr_recall),
            opt(r.fdr_recall),
            opt(r.tdr_precision),
            opt(r.fdr_precision),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
