//! The frozen multimodal network: per-modality projectors into a shared
//! latent width, concatenation fusion, and a head with a prediction branch
//! and a positive uncertainty branch.

use serde::{Deserialize, Serialize};

use crate::data::ModalBatch;
use crate::error::{Error, Result};
use crate::losses::downstream_loss;
use crate::nn::{
    bind, gradients, rename, rename_mut, Activation, Adam, Dropout, LinearLayer, Mlp, ParamMut,
    ParamRef, Parameters,
};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::tensor::{Graph, Tensor, Var};
use crate::training::{minibatches, TrainSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub latent_dim: usize,
    pub fusion_dim: usize,
    pub head_hidden: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            fusion_dim: 32,
            head_hidden: 32,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.fusion_dim == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidConfig("architecture widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-modality latents for a batch. Rows where a modality is absent hold
/// zeros and are flagged in `presence`.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub values: Vec<Tensor>,
    pub presence: Vec<bool>,
}

impl Latents {
    pub fn modality_count(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_present(&self, row: usize, modality: usize) -> bool {
        self.presence[row * self.modality_count() + modality]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let m = self.modality_count();
        Self {
            values: self.values.iter().map(|v| v.select_rows(rows)).collect(),
            presence: rows
                .iter()
                .flat_map(|&r| self.presence[r * m..(r + 1) * m].iter().copied())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    projectors: Vec<Mlp>,
    fusion: Mlp,
}

impl Backbone {
    pub fn new(modality_dims: &[usize], arch: &ArchitectureConfig, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let d = arch.latent_dim;
        let projectors = modality_dims
            .iter()
            .map(|&n| Mlp::new(&[n, d, d], &[Activation::Relu, Activation::Identity], rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = Mlp::new(
            &[modality_dims.len() * d, arch.fusion_dim, arch.fusion_dim],
            &[Activation::Relu, Activation::Relu],
            rng,
        )?;
        Ok(Self { projectors, fusion })
    }

    pub fn from_parts(projectors: Vec<Mlp>, fusion: Mlp) -> Result<Self> {
        let d = projectors.first().map(Mlp::out_dim).unwrap_or(0);
        if projectors.is_empty() || projectors.iter().any(|p| p.out_dim() != d) {
            return Err(Error::InvalidConfig("projectors must share one output width".into()));
        }
        if fusion.in_dim() != d * projectors.len() {
            return Err(Error::InvalidConfig(format!(
                "fusion expects {} inputs, projectors provide {}",
                fusion.in_dim(),
                d * projectors.len()
            )));
        }
        Ok(Self { projectors, fusion })
    }

    pub fn modality_count(&self) -> usize {
        self.projectors.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.projectors[0].out_dim()
    }

    pub fn fusion_dim(&self) -> usize {
        self.fusion.out_dim()
    }

    pub fn freeze(&mut self) {
        self.projectors.iter_mut().for_each(Mlp::freeze);
        self.fusion.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.projectors.iter().all(Mlp::is_frozen) && self.fusion.is_frozen()
    }

    fn projector_params(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.projectors[..i].iter().map(|p| 2 * p.layers().len()).sum();
        start..start + 2 * self.projectors[i].layers().len()
    }

    fn fusion_params<'p>(&self, params: &'p [Var]) -> &'p [Var] {
        let start: usize = self.projectors.iter().map(|p| 2 * p.layers().len()).sum();
        &params[start..]
    }

    /// Traced projection of modality `i` with leaves from [`bind`].
    pub fn project_traced(&self, g: &mut Graph, i: usize, x: Var, params: &[Var]) -> Result<Var> {
        let range = self.projector_params(i);
        self.projectors[i].apply(g, x, &params[range], Dropout::Off)
    }

    /// Traced fusion of one latent per modality.
    pub fn fuse_traced(&self, g: &mut Graph, latents: &[Var], params: &[Var]) -> Result<Var> {
        if latents.len() != self.modality_count() {
            return Err(Error::Contract(format!(
                "fusion needs {} latents, got {}",
                self.modality_count(),
                latents.len()
            )));
        }
        let joined = g.concat(latents)?;
        self.fusion.apply(g, joined, self.fusion_params(params), Dropout::Off)
    }

    /// Latents of every present modality; absent rows are never projected.
    pub fn project(&self, batch: &ModalBatch) -> Result<Latents> {
        if batch.modality_count() != self.modality_count() {
            return Err(Error::Contract(format!(
                "batch has {} modalities, backbone {}",
                batch.modality_count(),
                self.modality_count()
            )));
        }
        let d = self.latent_dim();
        let values = (0..self.modality_count())
            .map(|i| {
                let rows: Vec<usize> = (0..batch.len()).filter(|&r| batch.is_present(r, i)).collect();
                let mut out = Tensor::zeros(&[batch.len(), d]);
                if rows.is_empty() {
                    return Ok(out);
                }
                let z = self.projectors[i].predict(&batch.inputs[i].select_rows(&rows))?;
                for (k, &r) in rows.iter().enumerate() {
                    out.data_mut()[r * d..(r + 1) * d].copy_from_slice(z.row(k));
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Latents {
            values,
            presence: batch.presence().to_vec(),
        })
    }

    /// Untraced fusion output for complete latents.
    pub fn fuse(&self, latents: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = bind(&mut g, self);
        let vars: Vec<Var> = latents.iter().map(|z| g.leaf(z.clone())).collect();
        let out = self.fuse_traced(&mut g, &vars, &params)?;
        Ok(g.value(out).clone())
    }
}

impl Parameters for Backbone {
    fn parameters(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<ParamRef<'_>> = self
            .projectors
            .iter()
            .enumerate()
            .flat_map(|(i, p)| rename(&format!("projector{i}"), p.parameters()))
            .collect();
        out.extend(rename("fusion", self.fusion.parameters()));
        out
    }

    fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out: Vec<ParamMut<'_>> = self
            .projectors
            .iter_mut()
            .enumerate()
            .flat_map(|(i, p)| rename_mut(&format!("projector{i}"), p.parameters_mut()))
            .collect();
        out.extend(rename_mut("fusion", self.fusion.parameters_mut()));
        out
    }
}

/// Shared trunk feeding a prediction layer and a softplus variance layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    trunk: Mlp,
    prediction: LinearLayer,
    uncertainty: LinearLayer,
}

/// Traced head outputs: raw scores (`n x k`) and variance (`n x 1`).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub prediction: Var,
    pub variance: Var,
}

impl ClassifierHead {
    pub fn new(input_dim: usize, hidden: usize, outputs: usize, dropout: f64, rng: &mut SeededRng) -> Result<Self> {
        let trunk = Mlp::new(&[input_dim, hidden], &[Activation::Relu], rng)?.with_dropout(&[dropout])?;
        Ok(Self {
            trunk,
            prediction: LinearLayer::init_with(rng, hidden, outputs)?,
            uncertainty: LinearLayer::init_with(rng, hidden, 1)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.prediction.out_dim()
    }

    pub fn dropout_rate(&self) -> f64 {
        self.trunk.dropout_rates()[0]
    }

    pub fn apply(&self, g: &mut Graph, fused: Var, params: &[Var], dropout: Dropout<'_>) -> Result<HeadOutput> {
        let t = 2 * self.trunk.layers().len();
        if params.len() != t + 4 {
            return Err(Error::Contract("head bound to the wrong number of leaves".into()));
        }
        let h = self.trunk.apply(g, fused, &params[..t], dropout)?;
        let prediction = LinearLayer::apply(g, h, params[t], params[t + 1])?;
        let raw = LinearLayer::apply(g, h, params[t + 2], params[t + 3])?;
        let variance = g.softplus(raw);
        Ok(HeadOutput { prediction, variance })
    }

    /// Untraced `(scores, variance)` from fused features.
    pub fn predict(&self, fused: &Tensor, dropout: Dropout<'_>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let params = bind(&mut g, self);
        let f = g.leaf(fused.clone());
        let out = self.apply(&mut g, f, &params, dropout)?;
        Ok((g.value(out.prediction).clone(), g.value(out.variance).clone()))
    }
}

impl Parameters for ClassifierHead {
    fn parameters(&self) -> Vec<ParamRef<'_>> {
        let mut out = rename("trunk", self.trunk.parameters());
        out.extend(rename("prediction", self.prediction.parameters()));
        out.extend(rename("uncertainty", self.uncertainty.parameters()));
        out
    }

    fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = rename_mut("trunk", self.trunk.parameters_mut());
        out.extend(rename_mut("prediction", self.prediction.parameters_mut()));
        out.extend(rename_mut("uncertainty", self.uncertainty.parameters_mut()));
        out
    }
}

/// Scores and variance for one latent per modality (observed or
/// reconstructed).
pub fn fuse_predict(
    backbone: &Backbone,
    head: &ClassifierHead,
    latents: &[Tensor],
    dropout: Dropout<'_>,
) -> Result<(Tensor, Tensor)> {
    let fused = backbone.fuse(latents)?;
    head.predict(&fused, dropout)
}

/// Trains backbone and a throwaway head on full-modality data with the
/// downstream loss, then freezes the backbone. Returns the mean training
/// loss of each epoch.
pub fn pretrain(
    backbone: &mut Backbone,
    head: &mut ClassifierHead,
    data: &ModalBatch,
    settings: &TrainSettings,
) -> Result<Vec<f64>> {
    settings.validate()?;
    if let Some(row) = (0..data.len()).find(|&r| !data.is_complete(r)) {
        return Err(Error::Contract(format!(
            "pretraining data must have every modality; row {row} does not"
        )));
    }
    let mut rng = seeded(derive_seed(settings.seed, 11));
    let mut opt = Adam::new(settings.lr);
    let mut log = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        let mut total = 0.0;
        for rows in minibatches(data.len(), settings.batch_size, &mut rng) {
            let batch = data.select_rows(&rows);
            let mut g = Graph::new();
            let bp = bind(&mut g, &*backbone);
            let hp = bind(&mut g, &*head);
            let latents = batch
                .inputs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let xv = g.leaf(x.clone());
                    backbone.project_traced(&mut g, i, xv, &bp)
                })
                .collect::<Result<Vec<_>>>()?;
            let fused = backbone.fuse_traced(&mut g, &latents, &bp)?;
            let out = head.apply(&mut g, fused, &hp, Dropout::Off)?;
            let labels = g.leaf(batch.labels.clone());
            let (loss, _) = downstream_loss(&mut g, data.task, out.prediction, labels)?;
            total += g.value(loss).item() * rows.len() as f64;
            g.backward(loss)?;
            let mut grads = gradients(&g, &bp);
            grads.extend(gradients(&g, &hp));
            let mut params = backbone.parameters_mut();
            params.extend(head.parameters_mut());
            opt.step(params, &grads)?;
        }
        log.push(total / data.len() as f64);
    }
    backbone.freeze();
    Ok(log)
}
