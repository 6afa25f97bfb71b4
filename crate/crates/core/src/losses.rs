//! Correlation and likelihood losses for uncertainty estimation.
//!
//! The correlation loss `1 - r(sigma2, err2)` rewards uncertainty that ranks
//! and scales *linearly* with the realized error without forcing the two onto
//! the same magnitude. The Gaussian negative log-likelihood is kept both as a
//! baseline and as an analytic reference.
//!
//! Every loss comes in two flavors: a graph builder (differentiable, used in
//! training) and a closed-form evaluation over slices (used by metrics and as
//! an independent oracle in tests).

use crate::data::Task;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// A sample Pearson coefficient. `degenerate` is set (and `r` is 0) when
/// either input has zero spread.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub degenerate: bool,
}

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "{op}: lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::BatchTooSmall {
            op,
            len: a.len(),
            min: 2,
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op,
            detail: "input contains NaN or infinity".into(),
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mu = mean(v);
    v.iter().map(|x| x - mu).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    check_pair("pearson", a, b)?;
    let (ca, cb) = (centered(a), centered(b));
    let (na, nb) = (norm(&ca), norm(&cb));
    if na == 0.0 || nb == 0.0 {
        return Ok(Correlation {
            r: 0.0,
            degenerate: true,
        });
    }
    let cov: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Ok(Correlation {
        r: (cov / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Value of the correlation loss, in `[0, 2]`; 1 for degenerate batches.
pub fn pcc_loss_value(sigma2: &[f64], err2: &[f64]) -> Result<(f64, bool)> {
    let c = pearson(sigma2, err2)?;
    if c.degenerate {
        return Ok((1.0, true));
    }
    Ok((1.0 - c.r, false))
}

/// Closed-form `d(1 - r) / d sigma2_i`.
///
/// With `s_i`, `e_i` the centered inputs and `S_s`, `S_e` their Euclidean
/// norms, the gradient is `(r s_i / S_s - e_i / S_e) / S_s`; it never divides
/// by an individual `sigma2_i`. Zero for degenerate batches.
pub fn pcc_grad_sigma(sigma2: &[f64], err2: &[f64]) -> Result<Vec<f64>> {
    check_pair("pcc_grad_sigma", sigma2, err2)?;
    let (cs, ce) = (centered(sigma2), centered(err2));
    let (ns, ne) = (norm(&cs), norm(&ce));
    if ns == 0.0 || ne == 0.0 {
        return Ok(vec![0.0; sigma2.len()]);
    }
    let r: f64 = cs.iter().zip(&ce).map(|(x, y)| x * y).sum::<f64>() / (ns * ne);
    Ok(cs
        .iter()
        .zip(&ce)
        .map(|(s, e)| (r * s / ns - e / ne) / ns)
        .collect())
}

/// Output of the differentiable correlation loss.
#[derive(Clone, Copy, Debug)]
pub struct PccLoss {
    pub value: Var,
    pub degenerate: bool,
}

/// Differentiable `1 - r(sigma2, err2)` over an `n x 1` uncertainty column.
///
/// `err2` enters as constants: errors are regression targets for the
/// uncertainty, so no gradient flows back into whatever produced them.
pub fn pcc_loss(g: &mut Graph, sigma2: Var, err2: &[f64]) -> Result<PccLoss> {
    let values = g.value(sigma2).data().to_vec();
    check_pair("pcc_loss", &values, err2)?;
    let ce = centered(err2);
    let ne = norm(&ce);
    if ne == 0.0 || norm(&centered(&values)) == 0.0 {
        let value = g.leaf(Tensor::scalar(1.0));
        return Ok(PccLoss {
            value,
            degenerate: true,
        });
    }
    let shape = g.value(sigma2).shape().to_vec();
    let mu = g.mean(sigma2);
    let mu_full = g.expand(mu, &shape)?;
    let cs = g.sub(sigma2, mu_full)?;
    let ce_var = g.leaf(Tensor::new(shape, ce)?);
    let prod = g.mul(cs, ce_var)?;
    let cov = g.sum(prod);
    let cs2 = g.square(cs);
    let ss = g.sum(cs2);
    let ns = g.sqrt(ss)?;
    let denom = g.scale(ns, ne);
    let r = g.div(cov, denom)?;
    let neg = g.scale(r, -1.0);
    let value = g.offset(neg, 1.0);
    Ok(PccLoss {
        value,
        degenerate: false,
    })
}

/// Both sides of the identity relating the correlation loss to the MSE of
/// standardized inputs:
/// `(1/2N) sum (sbar_i - ebar_i)^2 = ((2N - 2)/(2N)) (1 - r)`,
/// with standardization by the `N - 1` sample deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardizedMseCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub r: f64,
    pub residual: f64,
}

pub fn standardized_mse_identity(sigma2: &[f64], err2: &[f64]) -> Result<StandardizedMseCheck> {
    check_pair("standardized_mse_identity", sigma2, err2)?;
    let n = sigma2.len() as f64;
    let standardize = |v: &[f64]| -> Result<Vec<f64>> {
        let c = centered(v);
        let sd = (c.iter().map(|x| x * x).sum::<f64>() / (n - 1.0)).sqrt();
        if sd == 0.0 {
            return Err(Error::Degenerate("standardized_mse_identity"));
        }
        Ok(c.into_iter().map(|x| x / sd).collect())
    };
    let (s, e) = (standardize(sigma2)?, standardize(err2)?);
    let lhs = s.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * n);
    let r = pearson(sigma2, err2)?.r;
    let rhs = (2.0 * n - 2.0) / (2.0 * n) * (1.0 - r);
    Ok(StandardizedMseCheck {
        lhs,
        rhs,
        r,
        residual: (lhs - rhs).abs(),
    })
}

fn check_positive(op: &'static str, sigma2: &[f64]) -> Result<()> {
    if let Some(bad) = sigma2.iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Contract(format!(
            "{op}: variance must be positive and finite, got {bad}"
        )));
    }
    Ok(())
}

/// Mean Gaussian NLL `mean(err2 / (2 sigma2) + ln(sigma2) / 2)` from
/// precomputed squared errors.
pub fn nll_loss_value(err2: &[f64], sigma2: &[f64]) -> Result<f64> {
    if err2.len() != sigma2.len() || err2.is_empty() {
        return Err(Error::Contract("nll_loss: length mismatch or empty".into()));
    }
    check_positive("nll_loss", sigma2)?;
    Ok(err2
        .iter()
        .zip(sigma2)
        .map(|(e, s)| e / (2.0 * s) + s.ln() / 2.0)
        .sum::<f64>()
        / err2.len() as f64)
}

/// Derivative of one NLL term with respect to its variance,
/// `(sigma2 - err2) / (2 sigma2^2)`. The mean-reduced loss has this
/// gradient divided by the batch size.
pub fn nll_grad_sigma(sigma2: &[f64], err2: &[f64]) -> Result<Vec<f64>> {
    if err2.len() != sigma2.len() {
        return Err(Error::Contract("nll_grad_sigma: length mismatch".into()));
    }
    check_positive("nll_grad_sigma", sigma2)?;
    Ok(sigma2
        .iter()
        .zip(err2)
        .map(|(s, e)| (s - e) / (2.0 * s * s))
        .collect())
}

/// Differentiable NLL from an `n x 1` squared-error column and an `n x 1`
/// variance column. Gradients reach both.
pub fn nll_from_errors(g: &mut Graph, err2: Var, sigma2: Var) -> Result<Var> {
    check_positive("nll_loss", g.value(sigma2).data())?;
    let ratio = g.div(err2, sigma2)?;
    let half_ratio = g.scale(ratio, 0.5);
    let log_s = g.log(sigma2)?;
    let half_log = g.scale(log_s, 0.5);
    let terms = g.add(half_ratio, half_log)?;
    Ok(g.mean(terms))
}

/// Differentiable NLL of predictions `pred` against `target` (both `n x k`).
pub fn nll_loss(g: &mut Graph, pred: Var, target: Var, sigma2: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let err2 = g.sum_cols(sq)?;
    nll_from_errors(g, err2, sigma2)
}

fn check_labels(task: Task, g: &Graph, pred: Var, labels: Var) -> Result<()> {
    let (p, y) = (g.value(pred), g.value(labels));
    if p.shape() != y.shape() || p.cols() != task.output_dim() {
        return Err(Error::Contract(format!(
            "label shape {:?} does not match prediction {:?} for {task:?}",
            y.shape(),
            p.shape()
        )));
    }
    Ok(())
}

/// Per-sample error column: squared error for regression, cross entropy of
/// the softmaxed logits against one-hot labels for classification.
pub fn per_sample_error(g: &mut Graph, task: Task, pred: Var, labels: Var) -> Result<Var> {
    check_labels(task, g, pred, labels)?;
    match task {
        Task::Regression => {
            let diff = g.sub(pred, labels)?;
            let sq = g.square(diff);
            Ok(g.sum_cols(sq)?)
        }
        Task::Classification { .. } => {
            let logp = g.log_softmax(pred)?;
            let picked = g.mul(logp, labels)?;
            let ll = g.sum_cols(picked)?;
            Ok(g.scale(ll, -1.0))
        }
    }
}

/// Batch-mean downstream loss and the per-sample error column it averages.
pub fn downstream_loss(g: &mut Graph, task: Task, pred: Var, labels: Var) -> Result<(Var, Var)> {
    let per_sample = per_sample_error(g, task, pred, labels)?;
    Ok((g.mean(per_sample), per_sample))
}

/// Untraced per-sample errors.
pub fn per_sample_error_values(task: Task, pred: &Tensor, labels: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = g.leaf(pred.clone());
    let y = g.leaf(labels.clone());
    let e = per_sample_error(&mut g, task, p, y)?;
    Ok(g.value(e).data().to_vec())
}
