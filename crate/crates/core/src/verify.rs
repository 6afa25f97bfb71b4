//! Analytic self-checks that need no training.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{nll_grad_sigma, nll_loss_value, pcc_loss, pcc_loss_value, standardized_mse_identity};
use crate::nn::{Activation, Mlp};
use crate::propagation::propagate;
use crate::rng::{seeded, SeededRng};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed deviation.
    pub worst: f64,
    pub tolerance: f64,
}

/// Central difference of `f` at `x` in every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn normals(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn positives(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.05..2.0)).collect()
}

fn outcome(name: &'static str, worst: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: worst < tolerance,
        worst,
        tolerance,
    }
}

pub fn check_identity(seed: u64) -> Result<CheckOutcome> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for n in [2, 16, 64, 256] {
        for _ in 0..100 {
            let s = positives(&mut rng, n);
            let e = positives(&mut rng, n);
            worst = worst.max(standardized_mse_identity(&s, &e)?.residual);
        }
    }
    Ok(outcome("standardized-mse identity", worst, 1e-9))
}

fn autodiff_pcc_grad(sigma2: &[f64], err2: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let s = g.leaf(Tensor::column(sigma2.to_vec()));
    let loss = pcc_loss(&mut g, s, err2)?.value;
    g.backward(loss)?;
    Ok(g.grad(s).into_data())
}

fn autodiff_nll_grad(sigma2: &[f64], err2: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let s = g.leaf(Tensor::column(sigma2.to_vec()));
    let e = g.leaf(Tensor::column(err2.to_vec()));
    let loss = crate::losses::nll_from_errors(&mut g, e, s)?;
    g.backward(loss)?;
    Ok(g.grad(s).into_data())
}

/// Autodiff against central differences for both uncertainty losses.
pub fn check_loss_gradients(seed: u64) -> Result<CheckOutcome> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let s = positives(&mut rng, 32);
        let e = positives(&mut rng, 32);
        let ad = autodiff_pcc_grad(&s, &e)?;
        let fd = central_difference(&s, 1e-5, |x| pcc_loss_value(x, &e).map(|v| v.0).unwrap_or(f64::NAN));
        worst = worst.max(max_relative_error(&ad, &fd, 1e-3));
        let ad = autodiff_nll_grad(&s, &e)?;
        let fd = central_difference(&s, 1e-5, |x| nll_loss_value(&e, x).unwrap_or(f64::NAN));
        worst = worst.max(max_relative_error(&ad, &fd, 1e-3));
    }
    Ok(outcome("loss gradients vs finite differences", worst, 1e-6))
}

/// Mean-reduced autodiff gradient times N against the per-term closed form.
pub fn check_nll_closed_form(seed: u64) -> Result<CheckOutcome> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let s = positives(&mut rng, 32);
        let e = positives(&mut rng, 32);
        let n = s.len() as f64;
        let ad: Vec<f64> = autodiff_nll_grad(&s, &e)?.into_iter().map(|x| x * n).collect();
        worst = worst.max(max_relative_error(&ad, &nll_grad_sigma(&s, &e)?, 1.0));
    }
    Ok(outcome("nll gradient vs closed form", worst, 1e-9))
}

/// A linear path's first-order variance against `w^T Sigma w`.
pub fn check_linear_propagation(seed: u64) -> Result<CheckOutcome> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let dims = [3usize, 5];
        let weights: Vec<Vec<f64>> = dims.iter().map(|&d| normals(&mut rng, d)).collect();
        let rows = 4;
        let latents: Vec<Tensor> = dims
            .iter()
            .map(|&d| Tensor::matrix(rows, d, normals(&mut rng, rows * d)))
            .collect::<std::result::Result<_, _>>()?;
        let variances: Vec<Vec<f64>> = dims.iter().map(|_| positives(&mut rng, rows)).collect();
        let w = weights.clone();
        let path = move |g: &mut Graph, z: &[Var]| -> Result<Var> {
            let mut total: Option<Var> = None;
            for (zi, wi) in z.iter().zip(&w) {
                let wv = g.leaf(Tensor::matrix(wi.len(), 1, wi.clone())?);
                let p = g.matmul(*zi, wv)?;
                total = Some(match total {
                    Some(t) => g.add(t, p)?,
                    None => p,
                });
            }
            Ok(total.expect("two inputs"))
        };
        let got = propagate(&path, &latents, &variances)?;
        for r in 0..rows {
            let exact: f64 = weights
                .iter()
                .zip(&variances)
                .map(|(w, v)| v[r] * w.iter().map(|x| x * x).sum::<f64>())
                .sum();
            worst = worst.max((got.input_variance[r] - exact).abs());
        }
    }
    Ok(outcome("linear propagation exactness", worst, 1e-9))
}

/// Input gradient of a small network against central differences.
pub fn check_network_gradients(seed: u64) -> Result<CheckOutcome> {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let net = Mlp::new(
            &[4, 6, 3],
            &[Activation::Softplus, Activation::Identity],
            &mut rng,
        )?;
        let x = normals(&mut rng, 8);
        let loss_of = |values: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let input = g.leaf(Tensor::matrix(2, 4, values.to_vec())?);
            let out = net.forward(&mut g, input, crate::nn::Dropout::Off)?.output;
            let logp = g.log_softmax(out)?;
            let sq = g.square(logp);
            let loss = g.sum(sq);
            g.backward(loss)?;
            Ok((g.value(loss).item(), g.grad(input).into_data()))
        };
        let (_, ad) = loss_of(&x)?;
        let fd = central_difference(&x, 1e-5, |v| loss_of(v).map(|r| r.0).unwrap_or(f64::NAN));
        worst = worst.max(max_relative_error(&ad, &fd, 1e-3));
    }
    Ok(outcome("network gradients vs finite differences", worst, 1e-6))
}

pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_identity(seed)?,
        check_loss_gradients(seed)?,
        check_nll_closed_form(seed)?,
        check_linear_propagation(seed)?,
        check_network_gradients(seed)?,
    ])
}
