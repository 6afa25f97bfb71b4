//! First-order propagation of reconstruction variance to the network output,
//! and a sampling oracle for it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ClassifierHead};
use crate::error::{Error, Result};
use crate::nn::{bind, Dropout};
use crate::rng::seeded;
use crate::tensor::{Graph, Tensor, Var};

/// A differentiable map from one latent per modality (`n x d` each) to an
/// `n x o` output, applied row by row with no coupling between rows.
pub trait PredictionPath {
    fn output(&self, g: &mut Graph, latents: &[Var]) -> Result<Var>;
}

impl<F> PredictionPath for F
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fn output(&self, g: &mut Graph, latents: &[Var]) -> Result<Var> {
        self(g, latents)
    }
}

/// Latents to fused features.
pub struct FusionPath<'a>(pub &'a Backbone);

impl PredictionPath for FusionPath<'_> {
    fn output(&self, g: &mut Graph, latents: &[Var]) -> Result<Var> {
        let params = bind(g, self.0);
        self.0.fuse_traced(g, latents, &params)
    }
}

/// Latents to the head's raw scores.
pub struct ScorePath<'a> {
    pub backbone: &'a Backbone,
    pub head: &'a ClassifierHead,
}

impl PredictionPath for ScorePath<'_> {
    fn output(&self, g: &mut Graph, latents: &[Var]) -> Result<Var> {
        let fused = FusionPath(self.backbone).output(g, latents)?;
        let params = bind(g, self.head);
        Ok(self.head.apply(g, fused, &params, Dropout::Off)?.prediction)
    }
}

/// Per-row propagation result.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    /// Per modality, per row: squared Jacobian norm of the output with
    /// respect to that modality's latent. Zero for modalities carrying no
    /// variance anywhere.
    pub sensitivity: Vec<Vec<f64>>,
    /// `sum_i sensitivity_i * variance_i`.
    pub input_variance: Vec<f64>,
}

fn check_inputs(latents: &[Tensor], variances: &[Vec<f64>]) -> Result<usize> {
    let n = latents.first().map(Tensor::rows).unwrap_or(0);
    if variances.len() != latents.len() || latents.iter().any(|z| z.rows() != n) {
        return Err(Error::Contract(format!(
            "{} latents and {} variance columns must align",
            latents.len(),
            variances.len()
        )));
    }
    for (i, v) in variances.iter().enumerate() {
        if v.len() != n {
            return Err(Error::Contract(format!("variance column {i} has {} rows, expected {n}", v.len())));
        }
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Contract(format!(
                "variance column {i} must be finite and non-negative"
            )));
        }
    }
    Ok(n)
}

/// Delta-method input variance. `variances[i][r]` is the isotropic
/// per-coordinate variance of modality `i`'s latent in row `r`, zero where
/// the latent was observed.
///
/// Rows do not interact, so one backward pass per output component of the
/// batch-summed output yields every row's own gradient.
pub fn propagate(path: &impl PredictionPath, latents: &[Tensor], variances: &[Vec<f64>]) -> Result<Propagation> {
    let n = check_inputs(latents, variances)?;
    let m = latents.len();
    let mut sensitivity = vec![vec![0.0; n]; m];
    let active: Vec<usize> = (0..m).filter(|&i| variances[i].iter().any(|&v| v > 0.0)).collect();
    if !active.is_empty() && n > 0 {
        let mut g = Graph::new();
        let leaves: Vec<Var> = latents.iter().map(|z| g.leaf(z.clone())).collect();
        let out = path.output(&mut g, &leaves)?;
        for o in 0..g.value(out).cols() {
            let column = g.slice_cols(out, o, o + 1)?;
            let root = g.sum(column);
            g.backward(root)?;
            for &i in &active {
                let grad = g.grad(leaves[i]);
                let d = grad.cols();
                for (r, s) in sensitivity[i].iter_mut().enumerate() {
                    *s += grad.data()[r * d..(r + 1) * d].iter().map(|x| x * x).sum::<f64>();
                }
            }
        }
    }
    let input_variance = (0..n)
        .map(|r| (0..m).map(|i| sensitivity[i][r] * variances[i][r]).sum())
        .collect();
    Ok(Propagation {
        sensitivity,
        input_variance,
    })
}

/// Total variance as the sum of input-induced and intrinsic parts.
pub fn combine(input: &[f64], intrinsic: &[f64]) -> Result<Vec<f64>> {
    if input.len() != intrinsic.len() {
        return Err(Error::Contract("variance vectors differ in length".into()));
    }
    if input.iter().chain(intrinsic).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Contract("variances must be finite and non-negative".into()));
    }
    Ok(input.iter().zip(intrinsic).map(|(a, b)| a + b).collect())
}

/// Sampling estimate of one row's output variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub variance: f64,
    pub std_error: f64,
}

const MC_CHUNK: usize = 10_000;

/// Perturbs each latent of each row with isotropic Gaussian noise of the
/// given variance and measures the spread of the output, summed over
/// output components.
pub fn mc_oracle(
    path: &impl PredictionPath,
    latents: &[Tensor],
    variances: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    let n = check_inputs(latents, variances)?;
    if samples < 1000 {
        return Err(Error::InvalidConfig(format!("oracle needs >= 1000 samples, got {samples}")));
    }
    let mut rng = seeded(seed);
    let mut estimates = Vec::with_capacity(n);
    for r in 0..n {
        let mut outputs: Vec<f64> = Vec::new();
        let mut width = 0;
        let mut remaining = samples;
        while remaining > 0 {
            let chunk = remaining.min(MC_CHUNK);
            remaining -= chunk;
            let mut g = Graph::new();
            let leaves: Vec<Var> = latents
                .iter()
                .zip(variances)
                .map(|(z, v)| {
                    let sd = v[r].sqrt();
                    let row = z.row(r);
                    let data = (0..chunk)
                        .flat_map(|_| row.iter().map(|&x| x + sd * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
                        .collect();
                    Tensor::matrix(chunk, row.len(), data).map(|t| g.leaf(t))
                })
                .collect::<std::result::Result<_, _>>()?;
            let out = path.output(&mut g, &leaves)?;
            width = g.value(out).cols();
            outputs.extend_from_slice(g.value(out).data());
        }
        // shift by the first draw so constant outputs give exactly zero
        let shift = outputs[..width].to_vec();
        outputs.iter_mut().enumerate().for_each(|(k, y)| *y -= shift[k % width]);
        let mut mean = vec![0.0; width];
        for k in 0..samples {
            for o in 0..width {
                mean[o] += outputs[k * width + o];
            }
        }
        mean.iter_mut().for_each(|m| *m /= samples as f64);
        let spread: Vec<f64> = (0..samples)
            .map(|k| (0..width).map(|o| (outputs[k * width + o] - mean[o]).powi(2)).sum())
            .collect();
        let s = samples as f64;
        let variance = spread.iter().sum::<f64>() / (s - 1.0);
        let q_mean = spread.iter().sum::<f64>() / s;
        let q_var = spread.iter().map(|q| (q - q_mean).powi(2)).sum::<f64>() / (s - 1.0);
        estimates.push(McEstimate {
            variance,
            std_error: (q_var / s).sqrt(),
        });
    }
    Ok(estimates)
}

/// Per-sample uncertainty breakdown. Fields are `None` for methods that do
/// not estimate them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub row: usize,
    /// Modalities whose latent was reconstructed.
    pub reconstructed: Vec<usize>,
    /// Per modality; zero where observed.
    pub reconstruction_variance: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub input_variance: Option<f64>,
    pub intrinsic_variance: Option<f64>,
    pub total_variance: Option<f64>,
    pub error: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(weights: Vec<Vec<f64>>) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> {
        move |g: &mut Graph, z: &[Var]| {
            let mut total: Option<Var> = None;
            for (zi, w) in z.iter().zip(&weights) {
                let wv = g.leaf(Tensor::matrix(w.len(), 1, w.clone())?);
                let p = g.matmul(*zi, wv)?;
                total = Some(match total {
                    None => p,
                    Some(t) => g.add(t, p)?,
                });
            }
            Ok(total.expect("at least one input"))
        }
    }

    #[test]
    fn scalar_linear_map_is_exact() {
        let path = linear(vec![vec![3.0]]);
        let p = propagate(&path, &[Tensor::column(vec![0.7])], &[vec![0.5]]).unwrap();
        assert_eq!(p.input_variance, vec![4.5]);
        assert_eq!(p.sensitivity[0], vec![9.0]);
    }

    #[test]
    fn two_inputs_add_their_contributions() {
        // gradient norms squared 1 and 4
        let path = linear(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        let z = Tensor::from_rows(&[vec![0.2, 0.3]]).unwrap();
        let p = propagate(&path, &[z.clone(), z], &[vec![1.0], vec![1.0]]).unwrap();
        assert!((p.input_variance[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn nothing_reconstructed_means_no_input_variance() {
        let path = linear(vec![vec![1.0], vec![2.0]]);
        let z = Tensor::column(vec![1.0, 2.0, 3.0]);
        let p = propagate(&path, &[z.clone(), z], &[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert_eq!(p.input_variance, vec![0.0; 3]);
    }

    #[test]
    fn ignored_input_contributes_nothing() {
        let path = |g: &mut Graph, z: &[Var]| -> Result<Var> { Ok(g.square(z[0])) };
        let z = Tensor::column(vec![1.5, -2.0]);
        let p = propagate(&path, &[z.clone(), z], &[vec![0.1, 0.2], vec![3.0, 4.0]]).unwrap();
        assert_eq!(p.sensitivity[1], vec![0.0, 0.0]);
        assert!((p.input_variance[0] - 9.0 * 0.1).abs() < 1e-12);
        assert!((p.input_variance[1] - 16.0 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn negative_variance_is_a_contract_error() {
        let path = linear(vec![vec![1.0]]);
        assert!(matches!(
            propagate(&path, &[Tensor::column(vec![1.0])], &[vec![-0.1]]),
            Err(Error::Contract(_))
        ));
        assert!(propagate(&path, &[Tensor::column(vec![1.0])], &[]).is_err());
    }

    #[test]
    fn combine_adds_and_validates() {
        assert_eq!(combine(&[4.5, 0.0], &[0.5, 0.3]).unwrap(), vec![5.0, 0.3]);
        assert!(combine(&[-1.0], &[1.0]).is_err());
        assert!(combine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn oracle_without_noise_has_no_spread() {
        let path = linear(vec![vec![1.0, -2.0]]);
        let z = Tensor::from_rows(&[vec![0.3, 0.1]]).unwrap();
        let est = mc_oracle(&path, &[z], &[vec![0.0]], 1000, 0).unwrap();
        assert_eq!(est[0].variance, 0.0);
        assert!(mc_oracle(&path, &[Tensor::zeros(&[1, 2])], &[vec![0.0]], 10, 0).is_err());
    }
}
