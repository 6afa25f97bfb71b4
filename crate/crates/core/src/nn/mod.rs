//! Fully connected layers, MLPs with inverted dropout, Adam, and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT};
pub use optim::Adam;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};
use crate::tensor::{Graph, Tensor, Var};

/// Read access to a named parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub value: &'a Tensor,
    pub frozen: bool,
}

/// Write access to a named parameter tensor.
pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
    pub frozen: bool,
}

/// Anything that owns trainable tensors.
///
/// `parameters`, `parameters_mut` and the `params` list returned by a forward
/// pass all enumerate tensors in the same order; optimizers rely on it.
pub trait Parameters {
    fn parameters(&self) -> Vec<ParamRef<'_>>;
    fn parameters_mut(&mut self) -> Vec<ParamMut<'_>>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    /// Bit patterns of every parameter value, for exact freeze checks.
    fn fingerprint(&self) -> Vec<u64> {
        self.parameters()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

fn prefixed(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn rename<'a>(prefix: &str, params: Vec<ParamRef<'a>>) -> Vec<ParamRef<'a>> {
    params
        .into_iter()
        .map(|mut p| {
            p.name = prefixed(prefix, &p.name);
            p
        })
        .collect()
}

pub(crate) fn rename_mut<'a>(prefix: &str, params: Vec<ParamMut<'a>>) -> Vec<ParamMut<'a>> {
    params
        .into_iter()
        .map(|mut p| {
            p.name = prefixed(prefix, &p.name);
            p
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Softplus => g.softplus(x),
        }
    }
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub frozen: bool,
}

impl LinearLayer {
    /// Glorot-uniform weights, zero bias, deterministic in `seed`.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        Self::init_with(&mut seeded(seed), in_dim, out_dim)
    }

    pub fn init_with(rng: &mut SeededRng, in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "linear layer dims must be >= 1, got {in_dim}x{out_dim}"
            )));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Ok(Self {
            weights: Tensor::matrix(in_dim, out_dim, data)?,
            bias: Tensor::zeros(&[out_dim]),
            frozen: false,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self {
            weights: Tensor::matrix(dim, dim, data).expect("square identity"),
            bias: Tensor::zeros(&[dim]),
            frozen: false,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Returns the output and the `[weights, bias]` leaves.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, [Var; 2])> {
        let w = g.leaf(self.weights.clone());
        let b = g.leaf(self.bias.clone());
        Ok((Self::apply(g, x, w, b)?, [w, b]))
    }

    /// `x W + b` with already bound parameter leaves.
    pub fn apply(g: &mut Graph, x: Var, weights: Var, bias: Var) -> Result<Var> {
        let xw = g.matmul(x, weights)?;
        Ok(g.add_row(xw, bias)?)
    }
}

impl Parameters for LinearLayer {
    fn parameters(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: "weights".into(),
                value: &self.weights,
                frozen: self.frozen,
            },
            ParamRef {
                name: "bias".into(),
                value: &self.bias,
                frozen: self.frozen,
            },
        ]
    }

    fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        let frozen = self.frozen;
        vec![
            ParamMut {
                name: "weights".into(),
                value: &mut self.weights,
                frozen,
            },
            ParamMut {
                name: "bias".into(),
                value: &mut self.bias,
                frozen,
            },
        ]
    }
}

/// Adds one leaf per parameter of `module`, in [`Parameters`] order.
pub fn bind(g: &mut Graph, module: &impl Parameters) -> Vec<Var> {
    module
        .parameters()
        .into_iter()
        .map(|p| g.leaf(p.value.clone()))
        .collect()
}

/// Gradients at `leaves` after `g.backward`; zeros where unreachable.
pub fn gradients(g: &Graph, leaves: &[Var]) -> Vec<Tensor> {
    leaves.iter().map(|&v| g.grad(v)).collect()
}

/// Output of a traced forward pass.
pub struct Forward {
    pub output: Var,
    /// Parameter leaves, in [`Parameters`] order.
    pub params: Vec<Var>,
}

/// How dropout behaves during a forward pass.
pub enum Dropout<'a> {
    Off,
    /// Sample fresh masks from the given stream.
    Sample(&'a mut SeededRng),
}

/// A stack of linear layers, each followed by an activation and optional
/// inverted dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
    activations: Vec<Activation>,
    dropout: Vec<f64>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`, one activation per layer.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::InvalidConfig(format!(
                "mlp needs one activation per layer: dims {dims:?}, {} activations",
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::init_with(rng, w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dropout: vec![0.0; layers.len()],
            layers,
            activations: activations.to_vec(),
        })
    }

    pub fn from_layers(layers: Vec<LinearLayer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::InvalidConfig(
                "mlp needs one activation per layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidConfig(format!(
                    "layer dims do not chain: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self {
            dropout: vec![0.0; layers.len()],
            layers,
            activations,
        })
    }

    /// Dropout rate applied after each layer's activation.
    pub fn with_dropout(mut self, rates: &[f64]) -> Result<Self> {
        if rates.len() != self.layers.len() || rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::InvalidConfig(format!(
                "dropout rates {rates:?} must be one per layer, each in [0, 1)"
            )));
        }
        self.dropout = rates.to_vec();
        Ok(self)
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dropout_rates(&self) -> &[f64] {
        &self.dropout
    }

    pub fn freeze(&mut self) {
        self.layers.iter_mut().for_each(|l| l.frozen = true);
    }

    pub fn is_frozen(&self) -> bool {
        self.layers.iter().all(|l| l.frozen)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, dropout: Dropout<'_>) -> Result<Forward> {
        let params = bind(g, self);
        let output = self.apply(g, x, &params, dropout)?;
        Ok(Forward { output, params })
    }

    /// Forward pass using leaves from [`bind`], so one set of leaves can
    /// serve several passes in the same graph.
    pub fn apply(&self, g: &mut Graph, x: Var, params: &[Var], mut dropout: Dropout<'_>) -> Result<Var> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::Contract(format!(
                "mlp with {} layers bound to {} leaves",
                self.layers.len(),
                params.len()
            )));
        }
        let cols = g.value(x).cols();
        if cols != self.in_dim() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "mlp_forward",
                left: g.value(x).shape().to_vec(),
                right: vec![self.in_dim(), self.layers[0].out_dim()],
            }
            .into());
        }
        let mut h = x;
        for (i, (act, &rate)) in self.activations.iter().zip(&self.dropout).enumerate() {
            let y = LinearLayer::apply(g, h, params[2 * i], params[2 * i + 1])?;
            h = act.apply(g, y);
            if let Dropout::Sample(rng) = &mut dropout {
                if rate > 0.0 {
                    let shape = g.value(h).shape().to_vec();
                    let keep = 1.0 / (1.0 - rate);
                    let n = shape.iter().product();
                    let mask = (0..n)
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    let m = g.leaf(Tensor::new(shape, mask)?);
                    h = g.mul(h, m)?;
                }
            }
        }
        Ok(h)
    }

    /// Untraced deterministic forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let out = self.forward(&mut g, xv, Dropout::Off)?;
        Ok(g.value(out.output).clone())
    }
}

impl Parameters for Mlp {
    fn parameters(&self) -> Vec<ParamRef<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| rename(&format!("layer{i}"), l.parameters()))
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| rename_mut(&format!("layer{i}"), l.parameters_mut()))
            .collect()
    }
}
