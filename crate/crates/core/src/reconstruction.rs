//! Cross-modal latent reconstruction with a per-sample variance estimate.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Latents;
use crate::error::{Error, Result};
use crate::losses::{nll_from_errors, pcc_loss};
use crate::nn::{
    bind, gradients, rename, rename_mut, Activation, Adam, Dropout, LinearLayer, Mlp, ParamMut,
    ParamRef, Parameters,
};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::tensor::{Graph, Tensor, Var};
use crate::training::{minibatches, TrainSettings};

/// Which term pairs the predicted variance with the realized error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyLoss {
    Correlation,
    Likelihood,
}

/// Reconstructs one target modality's latent from any other modality's.
///
/// Each source first passes through its own linear map into a shared space.
/// A trunk feeds a mean branch; the variance branch reads the trunk and
/// the mean together and ends in softplus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstructor {
    target: usize,
    projections: Vec<Option<LinearLayer>>,
    share: Mlp,
    mean: Mlp,
    variance: Mlp,
}

/// Traced reconstruction: mean `n x d`, variance `n x 1`.
#[derive(Clone, Copy, Debug)]
pub struct RecOutput {
    pub mean: Var,
    pub variance: Var,
}

impl Reconstructor {
    /// `trunk_depth` is the number of layers in the shared trunk (at least
    /// 2); the module then has `trunk_depth + 4` layers after projection.
    pub fn new(target: usize, modalities: usize, dim: usize, trunk_depth: usize, rng: &mut SeededRng) -> Result<Self> {
        if target >= modalities || modalities < 2 {
            return Err(Error::InvalidConfig(format!(
                "target {target} needs another modality among {modalities}"
            )));
        }
        if trunk_depth < 2 {
            return Err(Error::InvalidConfig("reconstruction trunk needs >= 2 layers".into()));
        }
        let hidden = 2 * dim;
        let projections = (0..modalities)
            .map(|j| (j != target).then(|| LinearLayer::init_with(rng, dim, dim)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let mut dims = vec![dim];
        dims.extend(std::iter::repeat_n(hidden, trunk_depth));
        let mut acts = vec![Activation::Relu; trunk_depth - 1];
        acts.push(Activation::Identity);
        Ok(Self {
            target,
            projections,
            share: Mlp::new(&dims, &acts, rng)?,
            mean: Mlp::new(&[hidden, hidden, dim], &[Activation::Relu, Activation::Identity], rng)?,
            variance: Mlp::new(&[hidden + dim, hidden, 1], &[Activation::Relu, Activation::Softplus], rng)?,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn layer_count(&self) -> usize {
        self.share.layers().len() + self.mean.layers().len() + self.variance.layers().len()
    }

    pub fn freeze(&mut self) {
        for p in self.projections.iter_mut().flatten() {
            p.frozen = true;
        }
        self.share.freeze();
        self.mean.freeze();
        self.variance.freeze();
    }

    fn check_source(&self, source: usize) -> Result<()> {
        match self.projections.get(source) {
            Some(Some(_)) => Ok(()),
            _ => Err(Error::Contract(format!(
                "modality {} cannot be reconstructed from source {source}",
                self.target
            ))),
        }
    }

    pub fn apply(&self, g: &mut Graph, z: Var, source: usize, params: &[Var]) -> Result<RecOutput> {
        self.check_source(source)?;
        let slot = self.projections[..source].iter().flatten().count();
        let mut at = 2 * self.projections.iter().flatten().count();
        let mut take = |n: usize| {
            let s = &params[at..at + n];
            at += n;
            s
        };
        let share_p = take(2 * self.share.layers().len());
        let mean_p = take(2 * self.mean.layers().len());
        let var_p = take(2 * self.variance.layers().len());

        let projected = LinearLayer::apply(g, z, params[2 * slot], params[2 * slot + 1])?;
        let shared = self.share.apply(g, projected, share_p, Dropout::Off)?;
        let act = g.relu(shared);
        let mean = self.mean.apply(g, act, mean_p, Dropout::Off)?;
        let joined = g.concat(&[shared, mean])?;
        let joined = g.relu(joined);
        let variance = self.variance.apply(g, joined, var_p, Dropout::Off)?;
        Ok(RecOutput { mean, variance })
    }

    /// Untraced `(mean, variance)` from one source latent.
    pub fn reconstruct(&self, z: &Tensor, source: usize) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let params = bind(&mut g, self);
        let zv = g.leaf(z.clone());
        let out = self.apply(&mut g, zv, source, &params)?;
        Ok((g.value(out.mean).clone(), g.value(out.variance).data().to_vec()))
    }
}

impl Parameters for Reconstructor {
    fn parameters(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<ParamRef<'_>> = self
            .projections
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.as_ref().map(|p| rename(&format!("projection{j}"), p.parameters())))
            .flatten()
            .collect();
        out.extend(rename("share", self.share.parameters()));
        out.extend(rename("mean", self.mean.parameters()));
        out.extend(rename("variance", self.variance.parameters()));
        out
    }

    fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out: Vec<ParamMut<'_>> = self
            .projections
            .iter_mut()
            .enumerate()
            .filter_map(|(j, p)| p.as_mut().map(|p| rename_mut(&format!("projection{j}"), p.parameters_mut())))
            .flatten()
            .collect();
        out.extend(rename_mut("share", self.share.parameters_mut()));
        out.extend(rename_mut("mean", self.mean.parameters_mut()));
        out.extend(rename_mut("variance", self.variance.parameters_mut()));
        out
    }
}

/// Averages per-source reconstructions of one target: the mean of the
/// means and the mean of the variances.
pub fn reconstruct_average(
    reconstructor: &Reconstructor,
    sources: &[(usize, &Tensor)],
) -> Result<(Tensor, Vec<f64>)> {
    let Some(((first, z0), rest)) = sources.split_first() else {
        return Err(Error::Contract("no available modality to reconstruct from".into()));
    };
    let (mut mean, mut var) = reconstructor.reconstruct(z0, *first)?;
    for &(j, z) in rest {
        let (m, v) = reconstructor.reconstruct(z, j)?;
        mean.data_mut().iter_mut().zip(m.data()).for_each(|(a, b)| *a += b);
        var.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    let k = sources.len() as f64;
    Ok((mean.map(|v| v / k), var.into_iter().map(|v| v / k).collect()))
}

/// Latents with every absent modality filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletedLatents {
    pub values: Vec<Tensor>,
    /// Per modality, per row; zero where the modality was observed.
    pub variances: Vec<Vec<f64>>,
    pub presence: Vec<bool>,
}

impl CompletedLatents {
    /// Uses observed latents as-is and zeros for absent ones, with no
    /// variance attached.
    pub fn zero_filled(latents: &Latents) -> Self {
        Self {
            values: latents.values.clone(),
            variances: vec![vec![0.0; latents.len()]; latents.modality_count()],
            presence: latents.presence.clone(),
        }
    }

    pub fn modality_count(&self) -> usize {
        self.values.len()
    }

    pub fn is_reconstructed(&self, row: usize, modality: usize) -> bool {
        !self.presence[row * self.modality_count() + modality]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let m = self.modality_count();
        Self {
            values: self.values.iter().map(|v| v.select_rows(rows)).collect(),
            variances: self
                .variances
                .iter()
                .map(|v| rows.iter().map(|&r| v[r]).collect())
                .collect(),
            presence: rows
                .iter()
                .flat_map(|&r| self.presence[r * m..(r + 1) * m].iter().copied())
                .collect(),
        }
    }
}

/// One reconstructor per modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionBank {
    modules: Vec<Reconstructor>,
}

impl ReconstructionBank {
    pub fn new(modalities: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::with_trunk_depth(modalities, dim, 2, rng)
    }

    pub fn with_trunk_depth(modalities: usize, dim: usize, trunk_depth: usize, rng: &mut SeededRng) -> Result<Self> {
        let modules = (0..modalities)
            .map(|i| Reconstructor::new(i, modalities, dim, trunk_depth, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { modules })
    }

    pub fn modules(&self) -> &[Reconstructor] {
        &self.modules
    }

    pub fn freeze(&mut self) {
        self.modules.iter_mut().for_each(Reconstructor::freeze);
    }

    /// Fills every absent latent from the modalities present in that row.
    pub fn complete(&self, latents: &Latents) -> Result<CompletedLatents> {
        let (m, len) = (latents.modality_count(), latents.len());
        if m != self.modules.len() {
            return Err(Error::Contract(format!(
                "{m} modalities for {} reconstructors",
                self.modules.len()
            )));
        }
        let mut values = latents.values.clone();
        let mut variances = vec![vec![0.0; len]; m];
        for (i, module) in self.modules.iter().enumerate() {
            let missing: Vec<usize> = (0..len).filter(|&r| !latents.is_present(r, i)).collect();
            if missing.is_empty() {
                continue;
            }
            let d = values[i].cols();
            let mut mean_sum = vec![0.0; len * d];
            let mut var_sum = vec![0.0; len];
            let mut count = vec![0usize; len];
            for j in (0..m).filter(|&j| j != i) {
                let rows: Vec<usize> = missing.iter().copied().filter(|&r| latents.is_present(r, j)).collect();
                if rows.is_empty() {
                    continue;
                }
                let (mean, var) = module.reconstruct(&latents.values[j].select_rows(&rows), j)?;
                for (k, &r) in rows.iter().enumerate() {
                    mean_sum[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(mean.row(k))
                        .for_each(|(a, b)| *a += b);
                    var_sum[r] += var[k];
                    count[r] += 1;
                }
            }
            for &r in &missing {
                if count[r] == 0 {
                    return Err(Error::Contract(format!("row {r} has no modality to reconstruct from")));
                }
                let k = count[r] as f64;
                let row = &mut values[i].data_mut()[r * d..(r + 1) * d];
                row.iter_mut()
                    .zip(&mean_sum[r * d..(r + 1) * d])
                    .for_each(|(a, b)| *a = b / k);
                variances[i][r] = var_sum[r] / k;
            }
        }
        Ok(CompletedLatents {
            values,
            variances,
            presence: latents.presence.clone(),
        })
    }
}

impl Parameters for ReconstructionBank {
    fn parameters(&self) -> Vec<ParamRef<'_>> {
        self.modules
            .iter()
            .enumerate()
            .flat_map(|(i, r)| rename(&format!("reconstructor{i}"), r.parameters()))
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.modules
            .iter_mut()
            .enumerate()
            .flat_map(|(i, r)| rename_mut(&format!("reconstructor{i}"), r.parameters_mut()))
            .collect()
    }
}

/// `mean_n ||mean_n - target_n||^2 + weight * U(variance, err)` where `err`
/// is the per-sample mean squared coordinate error and `U` is either the
/// correlation loss (errors detached) or the Gaussian likelihood.
pub fn rec_loss(
    g: &mut Graph,
    out: RecOutput,
    target: &Tensor,
    weight: f64,
    kind: UncertaintyLoss,
) -> Result<Var> {
    let n = target.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall {
            op: "rec_loss",
            len: n,
            min: 2,
        });
    }
    let t = g.leaf(target.clone());
    let diff = g.sub(out.mean, t)?;
    let sq = g.square(diff);
    let row_sum = g.sum_cols(sq)?;
    let mse = g.mean(row_sum);
    if weight == 0.0 {
        return Ok(mse);
    }
    let per_coord = g.scale(row_sum, 1.0 / target.cols() as f64);
    let uncertainty = match kind {
        UncertaintyLoss::Correlation => {
            let err2 = g.value(per_coord).data().to_vec();
            pcc_loss(g, out.variance, &err2)?.value
        }
        UncertaintyLoss::Likelihood => nll_from_errors(g, per_coord, out.variance)?,
    };
    let weighted = g.scale(uncertainty, weight);
    Ok(g.add(mse, weighted)?)
}

/// Per-epoch mean training loss and the directed pairs that had data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionLog {
    pub epoch_loss: Vec<f64>,
    pub trained_pairs: Vec<(usize, usize)>,
    pub skipped_pairs: Vec<(usize, usize)>,
}

/// Trains every directed `(target, source)` pair on the rows where both are
/// observed, summing the pair losses into one step per mini-batch.
pub fn train_reconstructors(
    bank: &mut ReconstructionBank,
    latents: &Latents,
    settings: &TrainSettings,
    weight: f64,
    kind: UncertaintyLoss,
) -> Result<ReconstructionLog> {
    settings.validate()?;
    let m = latents.modality_count();
    let mut trained_pairs = Vec::new();
    let mut skipped_pairs = Vec::new();
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            let both = (0..latents.len()).filter(|&r| latents.is_present(r, i) && latents.is_present(r, j)).count();
            if both < 2 {
                log::warn!("no rows with modalities {i} and {j} both present; pair skipped");
                skipped_pairs.push((i, j));
            } else {
                trained_pairs.push((i, j));
            }
        }
    }
    let mut rng = seeded(derive_seed(settings.seed, 21));
    let mut opt = Adam::new(settings.lr);
    let mut epoch_loss = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        let (mut total, mut batches) = (0.0, 0usize);
        for rows in minibatches(latents.len(), settings.batch_size, &mut rng) {
            let batch = latents.select_rows(&rows);
            let mut g = Graph::new();
            let params = bind(&mut g, &*bank);
            let mut offsets = Vec::with_capacity(m);
            let mut at = 0;
            for module in &bank.modules {
                offsets.push(at);
                at += module.parameters().len();
            }
            let mut terms = Vec::new();
            for &(i, j) in &trained_pairs {
                let pair_rows: Vec<usize> = (0..batch.len())
                    .filter(|&r| batch.is_present(r, i) && batch.is_present(r, j))
                    .collect();
                if pair_rows.len() < 2 {
                    continue;
                }
                let module = &bank.modules[i];
                let p = &params[offsets[i]..offsets[i] + module.parameters().len()];
                let z = g.leaf(batch.values[j].select_rows(&pair_rows));
                let out = module.apply(&mut g, z, j, p)?;
                terms.push(rec_loss(&mut g, out, &batch.values[i].select_rows(&pair_rows), weight, kind)?);
            }
            let Some((&first, rest)) = terms.split_first() else {
                continue;
            };
            let mut loss = first;
            for &t in rest {
                loss = g.add(loss, t)?;
            }
            total += g.value(loss).item();
            batches += 1;
            g.backward(loss)?;
            let grads = gradients(&g, &params);
            opt.step(bank.parameters_mut(), &grads)?;
        }
        epoch_loss.push(if batches == 0 { 0.0 } else { total / batches as f64 });
    }
    Ok(ReconstructionLog {
        epoch_loss,
        trained_pairs,
        skipped_pairs,
    })
}

/// Forward cost of reconstructing every modality once.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub modalities: usize,
    pub layers: usize,
    pub dim: usize,
    /// Scalar multiply-adds and elementwise operations counted by the graph.
    pub operations: u64,
    pub seconds: f64,
}

/// Builds `modalities` reconstructors with `layers` layers each at width
/// `dim` and measures one forward pass per target over `batch` rows, each
/// target reading the next modality.
pub fn complexity_probe(modalities: usize, layers: usize, dim: usize, batch: usize, seed: u64) -> Result<ProbeResult> {
    if layers < 6 {
        return Err(Error::InvalidConfig(format!("a reconstructor has at least 6 layers, got {layers}")));
    }
    let mut result = ProbeResult {
        modalities,
        layers,
        dim,
        operations: 0,
        seconds: 0.0,
    };
    if modalities == 0 {
        return Ok(result);
    }
    if modalities == 1 {
        return Err(Error::InvalidConfig("reconstruction needs at least 2 modalities".into()));
    }
    let mut rng = seeded(seed);
    let bank = ReconstructionBank::with_trunk_depth(modalities, dim, layers - 4, &mut rng)?;
    let z = Tensor::full(&[batch, dim], 0.5);
    let start = Instant::now();
    let mut g = Graph::new();
    for (i, module) in bank.modules.iter().enumerate() {
        let params = bind(&mut g, module);
        let zv = g.leaf(z.clone());
        module.apply(&mut g, zv, (i + 1) % modalities, &params)?;
    }
    result.seconds = start.elapsed().as_secs_f64();
    result.operations = g.op_count();
    Ok(result)
}
