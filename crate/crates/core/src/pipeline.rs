//! Two-phase training, uncertainty baselines, ablations, per-scenario
//! evaluation and run artifacts.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{pretrain, ArchitectureConfig, Backbone, ClassifierHead, Latents};
use crate::data::{apply_masks, generate, DatasetConfig, ModalBatch, Splits, Task};
use crate::error::{Error, Result};
use crate::evaluation::{
    calibrate, deferral_analysis, point_predictions, task_metrics, uce, write_deferral_csv,
    CalibrationStats, DeferralRow, TaskMetrics,
};
use crate::losses::{
    downstream_loss, nll_from_errors, pcc_loss, pearson, per_sample_error_values,
};
use crate::nn::{bind, gradients, Adam, Checkpoint, Dropout, Parameters};
use crate::propagation::{propagate, FusionPath, ScorePath, UncertaintyRecord};
use crate::reconstruction::{
    train_reconstructors, CompletedLatents, ReconstructionBank, ReconstructionLog, UncertaintyLoss,
};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Graph, Tensor};
use crate::training::{minibatches, TrainSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sure")]
    Sure,
    #[serde(rename = "sure-nll")]
    SureNll,
    #[serde(rename = "sure-mcdropout")]
    McDropout,
    #[serde(rename = "sure-ensemble")]
    Ensemble,
    /// Drops incomplete rows in training; no reconstruction.
    #[serde(rename = "ablation-1a")]
    IgnoreIncomplete,
    /// Zero latents for absent modalities; no reconstruction.
    #[serde(rename = "ablation-1b")]
    ZeroFill,
    /// Plain MSE reconstruction, no uncertainty outputs.
    #[serde(rename = "ablation-2a")]
    NoUncertainty,
    /// Total variance is the head's intrinsic variance only.
    #[serde(rename = "ablation-2b")]
    NoPropagation,
    /// Backbone trained from scratch on the fine-tune split.
    #[serde(rename = "ablation-3")]
    NoPretraining,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Sure,
        Method::SureNll,
        Method::McDropout,
        Method::Ensemble,
        Method::IgnoreIncomplete,
        Method::ZeroFill,
        Method::NoUncertainty,
        Method::NoPropagation,
        Method::NoPretraining,
    ];

    pub const ABLATIONS: [Method; 5] = [
        Method::IgnoreIncomplete,
        Method::ZeroFill,
        Method::NoUncertainty,
        Method::NoPropagation,
        Method::NoPretraining,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Sure => "sure",
            Method::SureNll => "sure-nll",
            Method::McDropout => "sure-mcdropout",
            Method::Ensemble => "sure-ensemble",
            Method::IgnoreIncomplete => "ablation-1a",
            Method::ZeroFill => "ablation-1b",
            Method::NoUncertainty => "ablation-2a",
            Method::NoPropagation => "ablation-2b",
            Method::NoPretraining => "ablation-3",
        }
    }

    fn reconstructs(self) -> bool {
        !matches!(self, Method::IgnoreIncomplete | Method::ZeroFill)
    }

    fn reconstruction_loss(self) -> Option<UncertaintyLoss> {
        match self {
            Method::Sure | Method::NoPretraining => Some(UncertaintyLoss::Correlation),
            Method::SureNll => Some(UncertaintyLoss::Likelihood),
            _ => None,
        }
    }

    fn output_loss(self) -> Option<UncertaintyLoss> {
        match self {
            Method::Sure
            | Method::NoPretraining
            | Method::NoPropagation
            | Method::IgnoreIncomplete
            | Method::ZeroFill => Some(UncertaintyLoss::Correlation),
            Method::SureNll => Some(UncertaintyLoss::Likelihood),
            Method::McDropout | Method::Ensemble | Method::NoUncertainty => None,
        }
    }

    fn propagates(self) -> bool {
        matches!(self, Method::Sure | Method::SureNll | Method::NoPretraining)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method tag {s:?}")))
    }
}

/// Where reconstruction variance is propagated to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationTarget {
    /// The frozen fusion output; constant throughout head training.
    Fusion,
    /// The head's scores; recomputed with the current head each batch.
    Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub mask_fraction: f64,
    pub architecture: ArchitectureConfig,
    pub pretrain: TrainSettings,
    pub phase1: TrainSettings,
    pub phase2: TrainSettings,
    /// Weight of the uncertainty term in the reconstruction loss.
    pub rec_weight: f64,
    /// Weight of the uncertainty term in head training.
    pub output_weight: f64,
    pub method: Method,
    pub mc_passes: usize,
    pub mc_dropout: f64,
    pub ensemble_members: usize,
    pub holdout_fraction: f64,
    pub propagation_target: PropagationTarget,
    pub deferral_quantiles: Vec<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let settings = |epochs| TrainSettings {
            epochs,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        };
        Self {
            dataset: DatasetConfig {
                modality_dims: vec![8, 8, 8],
                latent_dim: 3,
                noise_scales: vec![0.3, 0.6, 1.2],
                heteroscedasticity: 2.0,
                task: Task::Classification { classes: 4 },
                pretrain_samples: 10_000,
                finetune_samples: 1_000,
                test_samples: 2_000,
                seed: 0,
            },
            mask_fraction: 0.5,
            architecture: ArchitectureConfig::default(),
            pretrain: settings(20),
            phase1: settings(20),
            phase2: settings(100),
            rec_weight: 1.0,
            output_weight: 1.0,
            method: Method::Sure,
            mc_passes: 20,
            mc_dropout: 0.1,
            ensemble_members: 5,
            holdout_fraction: 0.2,
            propagation_target: PropagationTarget::Scores,
            deferral_quantiles: vec![0.5, 0.65, 0.8, 0.9, 0.95],
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.architecture.validate()?;
        for s in [&self.pretrain, &self.phase1, &self.phase2] {
            s.validate()?;
        }
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return bad("mask_fraction must be in [0, 1)");
        }
        if !(self.rec_weight >= 0.0 && self.output_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.mc_passes < 1 || self.ensemble_members < 1 {
            return bad("mc_passes and ensemble_members must be >= 1");
        }
        if !(0.0..1.0).contains(&self.mc_dropout) {
            return bad("mc_dropout must be in [0, 1)");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must be in (0, 1)");
        }
        if self.deferral_quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return bad("deferral quantiles must lie in (0, 1)");
        }
        Ok(())
    }

    /// The same configuration under another seed; the dataset follows.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.dataset.seed = seed;
        c
    }

    pub fn with_method(&self, method: Method) -> Self {
        let mut c = self.clone();
        c.method = method;
        c
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn settings(&self, base: &TrainSettings, stream: u64) -> TrainSettings {
        TrainSettings {
            seed: derive_seed(self.seed, stream),
            ..base.clone()
        }
    }

    fn head_dropout(&self) -> f64 {
        if self.method == Method::McDropout {
            self.mc_dropout
        } else {
            0.0
        }
    }

    fn member_count(&self) -> usize {
        if self.method == Method::Ensemble {
            self.ensemble_members
        } else {
            1
        }
    }
}

/// Frozen backbone, frozen reconstructors and trained heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub method: Method,
    pub backbone: Backbone,
    pub reconstructors: Option<ReconstructionBank>,
    pub heads: Vec<ClassifierHead>,
    pub calibration: Option<CalibrationStats>,
}

impl ModelBundle {
    /// Fresh, untrained modules shaped by `config`.
    fn initial(config: &RunConfig) -> Result<Self> {
        let arch = &config.architecture;
        let dims = &config.dataset.modality_dims;
        let backbone = Backbone::new(dims, arch, &mut seeded(derive_seed(config.seed, 10)))?;
        let reconstructors = if config.method.reconstructs() {
            Some(ReconstructionBank::new(dims.len(), arch.latent_dim, &mut seeded(derive_seed(config.seed, 20)))?)
        } else {
            None
        };
        let heads = (0..config.member_count())
            .map(|k| {
                ClassifierHead::new(
                    arch.fusion_dim,
                    arch.head_hidden,
                    config.dataset.task.output_dim(),
                    config.head_dropout(),
                    &mut seeded(derive_seed(config.seed, 30 + k as u64)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            method: config.method,
            backbone,
            reconstructors,
            heads,
            calibration: None,
        })
    }
}

/// Trains a backbone with a throwaway head on `data` and freezes it.
fn train_backbone(config: &RunConfig, data: &ModalBatch, settings: &TrainSettings) -> Result<(Backbone, Vec<f64>)> {
    let arch = &config.architecture;
    let mut backbone = Backbone::new(&config.dataset.modality_dims, arch, &mut seeded(derive_seed(config.seed, 10)))?;
    let mut head = ClassifierHead::new(
        arch.fusion_dim,
        arch.head_hidden,
        config.dataset.task.output_dim(),
        0.0,
        &mut seeded(derive_seed(config.seed, 12)),
    )?;
    let log = pretrain(&mut backbone, &mut head, data, settings)?;
    Ok((backbone, log))
}

/// Pretrains and freezes the backbone on the full-modality pretrain split.
pub fn pretrain_backbone(config: &RunConfig) -> Result<(Backbone, Vec<f64>)> {
    config.validate()?;
    let splits = generate(&config.dataset)?;
    train_backbone(config, &splits.pretrain, &config.settings(&config.pretrain, 13))
}

/// Fine-tune split after masking, partitioned into training and held-out
/// rows.
struct FinetuneData {
    train: ModalBatch,
    holdout: ModalBatch,
}

fn finetune_data(config: &RunConfig, splits: &Splits) -> Result<FinetuneData> {
    let masked = apply_masks(&splits.finetune, config.mask_fraction, derive_seed(config.seed, 1))?;
    let mut order: Vec<usize> = (0..masked.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeded(derive_seed(config.seed, 2)));
    let cut = ((config.holdout_fraction * masked.len() as f64).round() as usize).clamp(2, masked.len() - 1);
    let (holdout, train) = order.split_at(cut);
    let (mut holdout, mut train) = (holdout.to_vec(), train.to_vec());
    holdout.sort_unstable();
    train.sort_unstable();
    Ok(FinetuneData {
        train: masked.select_rows(&train),
        holdout: masked.select_rows(&holdout),
    })
}

/// Constant inputs to head training and evaluation.
struct Prepared {
    completed: CompletedLatents,
    fused: Tensor,
    labels: Tensor,
    /// Propagated to the fusion output; zeros when nothing is propagated.
    input_variance: Vec<f64>,
    sensitivity: Vec<Vec<f64>>,
}

fn prepare(bundle: &ModelBundle, config: &RunConfig, batch: &ModalBatch) -> Result<Prepared> {
    let latents = bundle.backbone.project(batch)?;
    let completed = match &bundle.reconstructors {
        Some(bank) => bank.complete(&latents)?,
        None => CompletedLatents::zero_filled(&latents),
    };
    let fused = bundle.backbone.fuse(&completed.values)?;
    let m = completed.modality_count();
    let (input_variance, sensitivity) =
        if bundle.method.propagates() && config.propagation_target == PropagationTarget::Fusion {
            let p = propagate(&FusionPath(&bundle.backbone), &completed.values, &completed.variances)?;
            (p.input_variance, p.sensitivity)
        } else {
            (vec![0.0; batch.len()], vec![vec![0.0; batch.len()]; m])
        };
    Ok(Prepared {
        completed,
        fused,
        labels: batch.labels.clone(),
        input_variance,
        sensitivity,
    })
}

/// Input variance per row and sensitivity per modality and row.
type InputVariance = (Vec<f64>, Vec<Vec<f64>>);

/// Input variance to add to the head's variance for `rows`, or `None` when
/// the method does not propagate.
fn input_variance_for(
    bundle: &ModelBundle,
    config: &RunConfig,
    head: &ClassifierHead,
    prep: &Prepared,
    rows: &[usize],
) -> Result<Option<InputVariance>> {
    let method = bundle.method;
    if !method.propagates() {
        return Ok(match method {
            Method::IgnoreIncomplete | Method::ZeroFill => Some((
                vec![0.0; rows.len()],
                vec![vec![0.0; rows.len()]; prep.completed.modality_count()],
            )),
            _ => None,
        });
    }
    let pick = |v: &[f64]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
    match config.propagation_target {
        PropagationTarget::Fusion => Ok(Some((
            pick(&prep.input_variance),
            prep.sensitivity.iter().map(|s| pick(s)).collect(),
        ))),
        PropagationTarget::Scores => {
            let sub = prep.completed.select_rows(rows);
            let path = ScorePath {
                backbone: &bundle.backbone,
                head,
            };
            let p = propagate(&path, &sub.values, &sub.variances)?;
            Ok(Some((p.input_variance, p.sensitivity)))
        }
    }
}

/// Head outputs for every row of a prepared set.
struct Outputs {
    scores: Tensor,
    input: Option<Vec<f64>>,
    intrinsic: Option<Vec<f64>>,
    total: Option<Vec<f64>>,
    sensitivity: Vec<Vec<f64>>,
    errors: Vec<f64>,
}

/// Mean scores and spread across score samples, summed over components.
fn spread(samples: &[Tensor]) -> (Tensor, Vec<f64>) {
    let first = &samples[0];
    let (n, k) = (first.rows(), first.cols());
    let t = samples.len() as f64;
    let mut mean = Tensor::zeros(first.shape());
    let mut shifted_mean = vec![0.0; n * k];
    for s in samples {
        for (i, v) in s.data().iter().enumerate() {
            mean.data_mut()[i] += v / t;
            shifted_mean[i] += (v - first.data()[i]) / t;
        }
    }
    let mut var = vec![0.0; n];
    if samples.len() > 1 {
        for s in samples {
            for (i, v) in s.data().iter().enumerate() {
                var[i / k] += (v - first.data()[i] - shifted_mean[i]).powi(2) / (t - 1.0);
            }
        }
    }
    (mean, var)
}

fn outputs(bundle: &ModelBundle, config: &RunConfig, prep: &Prepared, task: Task) -> Result<Outputs> {
    let n = prep.fused.rows();
    let m = prep.completed.modality_count();
    let all: Vec<usize> = (0..n).collect();
    let no_sensitivity = || vec![vec![0.0; n]; m];
    let (scores, input, intrinsic, total, sensitivity) = match bundle.method {
        Method::McDropout => {
            let mut rng = seeded(derive_seed(config.seed, 41));
            let head = &bundle.heads[0];
            let samples = (0..config.mc_passes)
                .map(|_| head.predict(&prep.fused, Dropout::Sample(&mut rng)).map(|(s, _)| s))
                .collect::<Result<Vec<_>>>()?;
            let (mean, var) = spread(&samples);
            (mean, None, None, Some(var), no_sensitivity())
        }
        Method::Ensemble => {
            let samples = bundle
                .heads
                .iter()
                .map(|h| h.predict(&prep.fused, Dropout::Off).map(|(s, _)| s))
                .collect::<Result<Vec<_>>>()?;
            let (mean, var) = spread(&samples);
            (mean, None, None, Some(var), no_sensitivity())
        }
        Method::NoUncertainty => {
            let (s, _) = bundle.heads[0].predict(&prep.fused, Dropout::Off)?;
            (s, None, None, None, no_sensitivity())
        }
        _ => {
            let head = &bundle.heads[0];
            let (s, v) = head.predict(&prep.fused, Dropout::Off)?;
            let intrinsic = v.into_data();
            match input_variance_for(bundle, config, head, prep, &all)? {
                Some((input, sens)) => {
                    let total = crate::propagation::combine(&input, &intrinsic)?;
                    (s, Some(input), Some(intrinsic), Some(total), sens)
                }
                None => {
                    let total = intrinsic.clone();
                    (s, None, Some(intrinsic), Some(total), no_sensitivity())
                }
            }
        }
    };
    let errors = per_sample_error_values(task, &scores, &prep.labels)?;
    Ok(Outputs {
        scores,
        input,
        intrinsic,
        total,
        sensitivity,
        errors,
    })
}

/// Per-epoch training loss and held-out correlation between total
/// variance and realized error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Log {
    pub epoch_loss: Vec<f64>,
    pub convergence: Vec<Option<f64>>,
}

fn train_phase2(
    bundle: &mut ModelBundle,
    config: &RunConfig,
    train: &Prepared,
    holdout: &Prepared,
    task: Task,
) -> Result<Phase2Log> {
    let settings = &config.phase2;
    let members = bundle.heads.len();
    let mut opts: Vec<Adam> = (0..members).map(|_| Adam::new(settings.lr)).collect();
    let mut shuffles: Vec<_> = (0..members).map(|k| seeded(derive_seed(config.seed, 50 + k as u64))).collect();
    let mut dropouts: Vec<_> = (0..members).map(|k| seeded(derive_seed(config.seed, 60 + k as u64))).collect();
    let n = train.fused.rows();
    let mut log = Phase2Log {
        epoch_loss: Vec::with_capacity(settings.epochs),
        convergence: Vec::with_capacity(settings.epochs),
    };
    for _ in 0..settings.epochs {
        let mut total_loss = 0.0;
        for k in 0..members {
            for rows in minibatches(n, settings.batch_size, &mut shuffles[k]) {
                let head = &bundle.heads[k];
                let input = input_variance_for(bundle, config, head, train, &rows)?;
                let mut g = Graph::new();
                let hp = bind(&mut g, head);
                let f = g.leaf(train.fused.select_rows(&rows));
                let dropout = if head.dropout_rate() > 0.0 {
                    Dropout::Sample(&mut dropouts[k])
                } else {
                    Dropout::Off
                };
                let out = head.apply(&mut g, f, &hp, dropout)?;
                let labels = g.leaf(train.labels.select_rows(&rows));
                let (down, per_sample) = downstream_loss(&mut g, task, out.prediction, labels)?;
                let mut loss = down;
                if let Some(kind) = bundle.method.output_loss() {
                    if rows.len() >= 2 && config.output_weight > 0.0 {
                        let total = match &input {
                            Some((v, _)) => {
                                let c = g.leaf(Tensor::column(v.clone()));
                                g.add(out.variance, c)?
                            }
                            None => out.variance,
                        };
                        let term = match kind {
                            UncertaintyLoss::Correlation => {
                                let err2 = g.value(per_sample).data().to_vec();
                                pcc_loss(&mut g, total, &err2)?.value
                            }
                            UncertaintyLoss::Likelihood => nll_from_errors(&mut g, per_sample, total)?,
                        };
                        let weighted = g.scale(term, config.output_weight);
                        loss = g.add(loss, weighted)?;
                    }
                }
                total_loss += g.value(loss).item() * rows.len() as f64;
                g.backward(loss)?;
                let grads = gradients(&g, &hp);
                opts[k].step(bundle.heads[k].parameters_mut(), &grads)?;
            }
        }
        log.epoch_loss.push(total_loss / (n * members) as f64);
        let out = outputs(bundle, config, holdout, task)?;
        log.convergence.push(match &out.total {
            Some(total) => {
                let c = pearson(total, &out.errors)?;
                (!c.degenerate).then_some(c.r)
            }
            None => None,
        });
    }
    Ok(log)
}

/// An evaluation condition on the test split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// The test split masked like the fine-tune split, with a fixed seed.
    Mixed,
    /// The listed modalities absent from every row; empty means complete.
    Missing(Vec<usize>),
}

impl Scenario {
    pub fn name(&self) -> String {
        match self {
            Scenario::Mixed => "mixed".into(),
            Scenario::Missing(ix) if ix.is_empty() => "full".into(),
            Scenario::Missing(ix) => format!(
                "missing={}",
                ix.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            ),
        }
    }

    /// Mixed, complete, then every proper nonempty subset of missing
    /// modalities ordered by size.
    pub fn all(modalities: usize) -> Vec<Scenario> {
        let mut subsets: Vec<Vec<usize>> = (1..(1usize << modalities) - 1)
            .map(|mask| (0..modalities).filter(|i| mask & (1 << i) != 0).collect())
            .collect();
        subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        let mut out = vec![Scenario::Mixed, Scenario::Missing(Vec::new())];
        out.extend(subsets.into_iter().map(Scenario::Missing));
        out
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Scenario::Mixed),
            "full" | "missing=" => Ok(Scenario::Missing(Vec::new())),
            _ => {
                let list = s
                    .strip_prefix("missing=")
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario {s:?}")))?;
                let mut ix = list
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::InvalidConfig(format!("bad modality index {t:?} in {s:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                ix.sort_unstable();
                ix.dedup();
                Ok(Scenario::Missing(ix))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: String,
    pub samples: usize,
    pub task: TaskMetrics,
    pub output_uncertainty_corr: Option<f64>,
    /// Per modality, over the rows where it was reconstructed.
    pub reconstruction_uncertainty_corr: Vec<Option<f64>>,
    pub mean_reconstruction_uncertainty_corr: Option<f64>,
    pub uce: Option<f64>,
    /// Largest `|total - intrinsic - input|` over rows.
    pub decomposition_residual: Option<f64>,
    pub max_input_variance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub records: Vec<UncertaintyRecord>,
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
    pub correct: Option<Vec<bool>>,
    pub metrics: ScenarioMetrics,
}

fn correlation(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() < 2 {
        return Ok(None);
    }
    let c = pearson(a, b)?;
    Ok((!c.degenerate).then_some(c.r))
}

/// Evaluates one scenario on the complete test split `test`.
pub fn evaluate_scenario(
    bundle: &ModelBundle,
    config: &RunConfig,
    test: &ModalBatch,
    true_latents: &Latents,
    scenario: &Scenario,
) -> Result<ScenarioResult> {
    let batch = match scenario {
        Scenario::Mixed => apply_masks(test, config.mask_fraction, derive_seed(config.seed, 5))?,
        Scenario::Missing(ix) => test.with_missing(ix)?,
    };
    let task = batch.task;
    let prep = prepare(bundle, config, &batch)?;
    let out = outputs(bundle, config, &prep, task)?;
    let m = batch.modality_count();
    let n = batch.len();

    let mut rec_corr = vec![None; m];
    if bundle.reconstructors.is_some() && bundle.method != Method::NoUncertainty {
        for (i, corr) in rec_corr.iter_mut().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&r| !batch.is_present(r, i)).collect();
            let d = true_latents.values[i].cols();
            let err: Vec<f64> = rows
                .iter()
                .map(|&r| {
                    let a = prep.completed.values[i].row(r);
                    let b = true_latents.values[i].row(r);
                    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / d as f64
                })
                .collect();
            let var: Vec<f64> = rows.iter().map(|&r| prep.completed.variances[i][r]).collect();
            *corr = correlation(&var, &err)?;
        }
    }
    let present_corrs: Vec<f64> = rec_corr.iter().flatten().copied().collect();
    let mean_rec = (!present_corrs.is_empty()).then(|| present_corrs.iter().sum::<f64>() / present_corrs.len() as f64);

    let output_corr = match &out.total {
        Some(t) => correlation(t, &out.errors)?,
        None => None,
    };
    let uce_value = match (&out.total, &bundle.calibration) {
        (Some(t), Some(stats)) if n >= 10 => {
            let calibrated = calibrate(t, stats)?;
            Some(uce(&calibrated, &out.errors, 10)?)
        }
        _ => None,
    };
    let residual = match (&out.total, &out.intrinsic, &out.input) {
        (Some(t), Some(w), Some(i)) => Some(
            (0..n)
                .map(|r| (t[r] - w[r] - i[r]).abs())
                .fold(0.0, f64::max),
        ),
        _ => None,
    };
    let predictions = point_predictions(task, &out.scores);
    let labels = point_predictions(task, &batch.labels);
    let correct = task
        .is_classification()
        .then(|| predictions.iter().zip(&labels).map(|(p, l)| p == l).collect::<Vec<_>>());

    let records = (0..n)
        .map(|r| UncertaintyRecord {
            row: r,
            reconstructed: (0..m).filter(|&i| !batch.is_present(r, i)).collect(),
            reconstruction_variance: (0..m).map(|i| prep.completed.variances[i][r]).collect(),
            sensitivity: (0..m)
                .map(|i| if batch.is_present(r, i) { 0.0 } else { out.sensitivity[i][r] })
                .collect(),
            input_variance: out.input.as_ref().map(|v| v[r]),
            intrinsic_variance: out.intrinsic.as_ref().map(|v| v[r]),
            total_variance: out.total.as_ref().map(|v| v[r]),
            error: out.errors[r],
        })
        .collect();
    let metrics = ScenarioMetrics {
        scenario: scenario.name(),
        samples: n,
        task: task_metrics(task, &out.scores, &batch.labels)?,
        output_uncertainty_corr: output_corr,
        reconstruction_uncertainty_corr: rec_corr,
        mean_reconstruction_uncertainty_corr: mean_rec,
        uce: uce_value,
        decomposition_residual: residual,
        max_input_variance: out.input.as_ref().map(|v| v.iter().copied().fold(0.0, f64::max)),
    };
    Ok(ScenarioResult {
        scenario: scenario.clone(),
        records,
        predictions,
        labels,
        correct,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scenarios: Vec<ScenarioResult>,
    /// On the mixed scenario, for classification with a total variance.
    pub deferral: Option<Vec<DeferralRow>>,
}

impl Evaluation {
    pub fn scenario(&self, name: &str) -> Option<&ScenarioResult> {
        self.scenarios.iter().find(|s| s.metrics.scenario == name)
    }

    pub fn report(&self, config: &RunConfig) -> MetricsReport {
        MetricsReport {
            method: config.method.tag().to_string(),
            seed: config.seed,
            scenarios: self.scenarios.iter().map(|s| s.metrics.clone()).collect(),
            deferral: self.deferral.clone(),
        }
    }
}

pub fn evaluate(bundle: &ModelBundle, config: &RunConfig, test: &ModalBatch, scenarios: &[Scenario]) -> Result<Evaluation> {
    let true_latents = bundle.backbone.project(test)?;
    let results = scenarios
        .iter()
        .map(|s| evaluate_scenario(bundle, config, test, &true_latents, s))
        .collect::<Result<Vec<_>>>()?;
    let deferral = match results.iter().find(|r| r.scenario == Scenario::Mixed) {
        Some(mixed) => match (&mixed.correct, mixed.records.iter().map(|r| r.total_variance).collect::<Option<Vec<_>>>()) {
            (Some(correct), Some(total)) => Some(deferral_analysis(&total, correct, &config.deferral_quantiles)?),
            _ => None,
        },
        None => None,
    };
    Ok(Evaluation {
        scenarios: results,
        deferral,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub scenarios: Vec<ScenarioMetrics>,
    pub deferral: Option<Vec<DeferralRow>>,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub bundle: ModelBundle,
    pub pretrain_loss: Vec<f64>,
    pub phase1: Option<ReconstructionLog>,
    pub phase2: Phase2Log,
    pub phase2_samples: usize,
    pub evaluation: Evaluation,
}

/// Runs the configured method end to end, pretraining a backbone first.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    run_with_backbone(config, None)
}

/// Runs the configured method with an already pretrained, frozen backbone
/// (ignored by the from-scratch ablation).
pub fn run_with_backbone(config: &RunConfig, pretrained: Option<(&Backbone, &[f64])>) -> Result<RunOutcome> {
    config.validate()?;
    let splits = generate(&config.dataset)?;
    let task = config.dataset.task;
    let finetune = finetune_data(config, &splits)?;
    let mut bundle = ModelBundle::initial(config)?;

    let pretrain_loss = if config.method == Method::NoPretraining {
        let complete = finetune.train.select_rows(&finetune.train.complete_rows());
        if complete.len() < 2 {
            return Err(Error::InvalidConfig("too few complete rows to train a backbone from scratch".into()));
        }
        let (backbone, log) = train_backbone(config, &complete, &config.settings(&config.phase2, 14))?;
        bundle.backbone = backbone;
        log
    } else if let Some((backbone, log)) = pretrained {
        if !backbone.is_frozen() {
            return Err(Error::Contract("supplied backbone must be frozen".into()));
        }
        bundle.backbone = backbone.clone();
        log.to_vec()
    } else {
        let (backbone, log) = train_backbone(config, &splits.pretrain, &config.settings(&config.pretrain, 13))?;
        bundle.backbone = backbone;
        log
    };

    let phase1 = match bundle.reconstructors.as_mut() {
        Some(bank) => {
            let latents = bundle.backbone.project(&finetune.train)?;
            let (weight, kind) = match config.method.reconstruction_loss() {
                Some(kind) => (config.rec_weight, kind),
                None => (0.0, UncertaintyLoss::Correlation),
            };
            let log = train_reconstructors(bank, &latents, &config.settings(&config.phase1, 15), weight, kind)?;
            bank.freeze();
            Some(log)
        }
        None => None,
    };

    let train_batch = if config.method == Method::IgnoreIncomplete {
        finetune.train.select_rows(&finetune.train.complete_rows())
    } else {
        finetune.train.clone()
    };
    if train_batch.len() < 2 {
        return Err(Error::InvalidConfig("too few training rows for head training".into()));
    }
    let train = prepare(&bundle, config, &train_batch)?;
    let holdout = prepare(&bundle, config, &finetune.holdout)?;
    let phase2 = train_phase2(&mut bundle, config, &train, &holdout, task)?;

    let fitted = outputs(&bundle, config, &train, task)?;
    bundle.calibration = match &fitted.total {
        Some(total) => CalibrationStats::fit(total, &fitted.errors).ok().filter(|s| s.variance_std > 0.0),
        None => None,
    };
    let evaluation = evaluate(&bundle, config, &splits.test, &Scenario::all(config.dataset.modality_count()))?;
    Ok(RunOutcome {
        config: config.clone(),
        bundle,
        pretrain_loss,
        phase1,
        phase2,
        phase2_samples: train_batch.len(),
        evaluation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub pretrain_final_loss: Option<f64>,
    pub phase1_initial_loss: Option<f64>,
    pub phase1_final_loss: Option<f64>,
    pub phase1_pairs: usize,
    pub phase1_skipped_pairs: Vec<(usize, usize)>,
    pub phase2_samples: usize,
    pub phase2_final_loss: Option<f64>,
    pub convergence: Vec<Option<f64>>,
    pub calibration: Option<CalibrationStats>,
    pub headline: Option<ScenarioMetrics>,
    pub scenarios: Vec<ScenarioMetrics>,
}

impl RunOutcome {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            method: self.config.method.tag().to_string(),
            seed: self.config.seed,
            config_hash: self.config.hash(),
            pretrain_final_loss: self.pretrain_loss.last().copied(),
            phase1_initial_loss: self.phase1.as_ref().and_then(|l| l.epoch_loss.first().copied()),
            phase1_final_loss: self.phase1.as_ref().and_then(|l| l.epoch_loss.last().copied()),
            phase1_pairs: self.phase1.as_ref().map_or(0, |l| l.trained_pairs.len()),
            phase1_skipped_pairs: self.phase1.as_ref().map(|l| l.skipped_pairs.clone()).unwrap_or_default(),
            phase2_samples: self.phase2_samples,
            phase2_final_loss: self.phase2.epoch_loss.last().copied(),
            convergence: self.phase2.convergence.clone(),
            calibration: self.bundle.calibration,
            headline: self.evaluation.scenario("mixed").map(|s| s.metrics.clone()),
            scenarios: self.evaluation.scenarios.iter().map(|s| s.metrics.clone()).collect(),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_records_csv(path: &Path, scenarios: &[ScenarioResult], modalities: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["scenario".to_string(), "row".into(), "reconstructed".into()];
    header.extend((0..modalities).map(|i| format!("rec_var_{i}")));
    header.extend((0..modalities).map(|i| format!("sensitivity_{i}")));
    header.extend(
        ["input_variance", "intrinsic_variance", "total_variance", "error", "prediction", "label"].map(String::from),
    );
    w.write_record(&header)?;
    for s in scenarios {
        let name = s.scenario.name();
        for (r, rec) in s.records.iter().enumerate() {
            let mut row = vec![
                name.clone(),
                rec.row.to_string(),
                rec.reconstructed.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"),
            ];
            row.extend(rec.reconstruction_variance.iter().map(ToString::to_string));
            row.extend(rec.sensitivity.iter().map(ToString::to_string));
            row.extend([
                opt(rec.input_variance),
                opt(rec.intrinsic_variance),
                opt(rec.total_variance),
                rec.error.to_string(),
                s.predictions[r].to_string(),
                s.labels[r].to_string(),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_convergence_csv(path: &Path, log: &Phase2Log) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "pearson", "loss"])?;
    for (e, (p, l)) in log.convergence.iter().zip(&log.epoch_loss).enumerate() {
        w.write_record([(e + 1).to_string(), opt(*p), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Provenance written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub files: Vec<String>,
}

pub fn write_manifest(dir: &Path, config_hash: &str, seed: u64, files: &[&str]) -> Result<()> {
    let manifest = RunManifest {
        config_hash: config_hash.to_string(),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        files: files.iter().map(|f| f.to_string()).collect(),
    };
    write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)
}

/// Writes metrics and the deferral curve for an evaluation.
pub fn write_evaluation(dir: &Path, config: &RunConfig, evaluation: &Evaluation) -> Result<Vec<&'static str>> {
    let mut files = vec!["metrics.json"];
    write_text(&dir.join("metrics.json"), &serde_json::to_string_pretty(&evaluation.report(config))?)?;
    if let Some(rows) = &evaluation.deferral {
        write_deferral_csv(&dir.join("deferral.csv"), rows)?;
        files.push("deferral.csv");
    }
    Ok(files)
}

pub fn save_bundle(dir: &Path, bundle: &ModelBundle) -> Result<()> {
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    Checkpoint::capture(&bundle.backbone).save(&ckpt.join("backbone.json"))?;
    if let Some(bank) = &bundle.reconstructors {
        Checkpoint::capture(bank).save(&ckpt.join("reconstructors.json"))?;
    }
    for (k, head) in bundle.heads.iter().enumerate() {
        Checkpoint::capture(head).save(&ckpt.join(format!("head{k}.json")))?;
    }
    write_text(&ckpt.join("calibration.json"), &serde_json::to_string_pretty(&bundle.calibration)?)
}

/// Rebuilds the modules described by `config` and restores their weights.
pub fn load_bundle(dir: &Path, config: &RunConfig) -> Result<ModelBundle> {
    let ckpt = dir.join("checkpoints");
    let mut bundle = ModelBundle::initial(config)?;
    Checkpoint::load(&ckpt.join("backbone.json"))?.restore(&mut bundle.backbone)?;
    bundle.backbone.freeze();
    if let Some(bank) = bundle.reconstructors.as_mut() {
        Checkpoint::load(&ckpt.join("reconstructors.json"))?.restore(bank)?;
        bank.freeze();
    }
    for (k, head) in bundle.heads.iter_mut().enumerate() {
        Checkpoint::load(&ckpt.join(format!("head{k}.json")))?.restore(head)?;
    }
    let path = ckpt.join("calibration.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    bundle.calibration = serde_json::from_str(&text)?;
    Ok(bundle)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: RunConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

/// Writes the full set of run artifacts into `dir`.
pub fn write_run(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = &outcome.config;
    write_text(&dir.join("config.json"), &serde_json::to_string_pretty(config)?)?;
    save_bundle(dir, &outcome.bundle)?;
    write_convergence_csv(&dir.join("convergence.csv"), &outcome.phase2)?;
    write_records_csv(&dir.join("records.csv"), &outcome.evaluation.scenarios, config.dataset.modality_count())?;
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&outcome.summary())?)?;
    let mut files = vec!["config.json", "checkpoints", "convergence.csv", "records.csv", "summary.json"];
    files.extend(write_evaluation(dir, config, &outcome.evaluation)?);
    write_manifest(dir, &config.hash(), config.seed, &files)
}
