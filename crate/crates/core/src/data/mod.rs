//! Synthetic multimodal datasets driven by a shared latent factor, and the
//! per-modality masking protocol.

mod io;

pub use io::{export_dataset, import_dataset, DatasetManifest};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

impl Task {
    /// Width of the prediction and of the label matrix.
    pub fn output_dim(self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { classes } => classes,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub modality_dims: Vec<usize>,
    pub latent_dim: usize,
    pub noise_scales: Vec<f64>,
    /// Per-sample noise multiplier is `exp(heteroscedasticity * tanh(u_0))`;
    /// 0 gives homoscedastic noise.
    #[serde(default)]
    pub heteroscedasticity: f64,
    pub task: Task,
    pub pretrain_samples: usize,
    pub finetune_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn modality_count(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.modality_dims.len() < 2 {
            return bad(format!("need at least 2 modalities, got {}", self.modality_dims.len()));
        }
        if self.modality_dims.contains(&0) || self.latent_dim == 0 {
            return bad("modality and latent dims must be >= 1".into());
        }
        if self.noise_scales.len() != self.modality_dims.len() {
            return bad(format!(
                "{} noise scales for {} modalities",
                self.noise_scales.len(),
                self.modality_dims.len()
            ));
        }
        if self.noise_scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise scales must be finite and >= 0".into());
        }
        if !self.heteroscedasticity.is_finite() {
            return bad("heteroscedasticity must be finite".into());
        }
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return bad(format!("classification needs >= 2 classes, got {classes}"));
            }
        }
        if self.pretrain_samples == 0 || self.finetune_samples == 0 || self.test_samples == 0 {
            return bad("every split needs at least one sample".into());
        }
        Ok(())
    }
}

/// Per-modality inputs, presence flags and labels for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalBatch {
    pub task: Task,
    /// One `len x n_i` matrix per modality; absent entries are zero.
    pub inputs: Vec<Tensor>,
    /// Row-major `len x M`.
    presence: Vec<bool>,
    /// One-hot `len x k` for classification, `len x 1` for regression.
    pub labels: Tensor,
}

impl ModalBatch {
    pub fn new(task: Task, inputs: Vec<Tensor>, presence: Vec<bool>, labels: Tensor) -> Result<Self> {
        let len = labels.rows();
        let m = inputs.len();
        if m == 0 || inputs.iter().any(|x| x.shape().len() != 2 || x.rows() != len) {
            return Err(Error::Contract("modality matrices must share the label row count".into()));
        }
        if presence.len() != len * m {
            return Err(Error::Contract(format!(
                "presence has {} flags for {len} rows and {m} modalities",
                presence.len()
            )));
        }
        if labels.cols() != task.output_dim() {
            return Err(Error::Contract(format!(
                "labels have {} columns, task needs {}",
                labels.cols(),
                task.output_dim()
            )));
        }
        let mut batch = Self {
            task,
            inputs,
            presence,
            labels,
        };
        if let Some(row) = (0..len).find(|&r| batch.present_count(r) == 0) {
            return Err(Error::Contract(format!("row {row} has no present modality")));
        }
        batch.zero_absent();
        Ok(batch)
    }

    fn zero_absent(&mut self) {
        let m = self.modality_count();
        for (i, x) in self.inputs.iter_mut().enumerate() {
            let cols = x.cols();
            for r in 0..self.labels.rows() {
                if !self.presence[r * m + i] {
                    x.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn is_present(&self, row: usize, modality: usize) -> bool {
        self.presence[row * self.modality_count() + modality]
    }

    pub fn present_count(&self, row: usize) -> usize {
        let m = self.modality_count();
        self.presence[row * m..(row + 1) * m].iter().filter(|&&p| p).count()
    }

    pub fn is_complete(&self, row: usize) -> bool {
        self.present_count(row) == self.modality_count()
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.is_complete(r)).collect()
    }

    /// Class index per row (argmax of the one-hot label).
    pub fn classes(&self) -> Vec<usize> {
        (0..self.len()).map(|r| argmax(self.labels.row(r))).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let m = self.modality_count();
        Self {
            task: self.task,
            inputs: self.inputs.iter().map(|x| x.select_rows(rows)).collect(),
            presence: rows
                .iter()
                .flat_map(|&r| self.presence[r * m..(r + 1) * m].iter().copied())
                .collect(),
            labels: self.labels.select_rows(rows),
        }
    }

    /// Same samples with every modality marked absent in `missing`.
    pub fn with_missing(&self, missing: &[usize]) -> Result<Self> {
        let m = self.modality_count();
        if let Some(&bad) = missing.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidConfig(format!("modality {bad} out of range 0..{m}")));
        }
        let mut presence = vec![true; self.len() * m];
        for r in 0..self.len() {
            for &i in missing {
                presence[r * m + i] = false;
            }
        }
        Self::new(self.task, self.inputs.clone(), presence, self.labels.clone())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// The three splits of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub pretrain: ModalBatch,
    pub finetune: ModalBatch,
    pub test: ModalBatch,
}

struct Generator {
    mixing: Vec<Tensor>,
    readout: Tensor,
}

fn normal_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

impl Generator {
    fn new(config: &DatasetConfig) -> Self {
        let mut rng = seeded(derive_seed(config.seed, 0));
        let p = config.latent_dim;
        let mixing = config
            .modality_dims
            .iter()
            .map(|&n| normal_matrix(&mut rng, p, n, 1.0 / (p as f64).sqrt()))
            .collect();
        let readout = normal_matrix(&mut rng, p, config.task.output_dim(), 1.0);
        Self { mixing, readout }
    }

    fn sample(&self, config: &DatasetConfig, len: usize, stream: u64) -> ModalBatch {
        let mut rng = seeded(derive_seed(config.seed, stream));
        let p = config.latent_dim;
        let latent = normal_matrix(&mut rng, len, p, 1.0);
        let spread: Vec<f64> = (0..len)
            .map(|r| (config.heteroscedasticity * latent.get(r, 0).tanh()).exp())
            .collect();
        let inputs = self
            .mixing
            .iter()
            .zip(&config.noise_scales)
            .map(|(a, &s)| {
                let mut x = latent.matmul(a).expect("latent x mixing");
                let cols = x.cols();
                for (i, v) in x.data_mut().iter_mut().enumerate() {
                    *v += s * spread[i / cols] * rng.sample::<f64, _>(StandardNormal);
                }
                x
            })
            .collect();
        let scores = latent.matmul(&self.readout).expect("latent x readout");
        let labels = match config.task {
            Task::Regression => {
                let noise: Vec<f64> = (0..len)
                    .map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::column(scores.data().iter().zip(noise).map(|(y, e)| y + e).collect())
            }
            Task::Classification { classes } => {
                let mut onehot = Tensor::zeros(&[len, classes]);
                for r in 0..len {
                    let c = argmax(scores.row(r));
                    onehot.data_mut()[r * classes + c] = 1.0;
                }
                onehot
            }
        };
        let m = config.modality_count();
        ModalBatch::new(config.task, inputs, vec![true; len * m], labels).expect("consistent by construction")
    }
}

/// Draws full-modality pretrain, fine-tune and test splits. The mixing
/// matrices and label readout are shared by all splits.
pub fn generate(config: &DatasetConfig) -> Result<Splits> {
    config.validate()?;
    let generator = Generator::new(config);
    Ok(Splits {
        pretrain: generator.sample(config, config.pretrain_samples, 1),
        finetune: generator.sample(config, config.finetune_samples, 2),
        test: generator.sample(config, config.test_samples, 3),
    })
}

/// Marks exactly `round(fraction * len)` rows absent per modality, each
/// modality from its own random stream, then repairs rows with nothing
/// present by swapping an absence onto a row that can spare one, which keeps
/// every per-modality count exact.
pub fn apply_masks(batch: &ModalBatch, fraction: f64, seed: u64) -> Result<ModalBatch> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "missing fraction must be in [0, 1), got {fraction}"
        )));
    }
    let (len, m) = (batch.len(), batch.modality_count());
    let absent = (fraction * len as f64).round() as usize;
    if absent * m > len * (m - 1) {
        return Err(Error::InvalidConfig(format!(
            "cannot mask {absent} of {len} rows in each of {m} modalities and keep one present per row"
        )));
    }
    let mut presence = vec![true; len * m];
    for i in 0..m {
        let mut rng = seeded(derive_seed(seed, 100 + i as u64));
        let mut rows: Vec<usize> = (0..len).collect();
        rows.shuffle(&mut rng);
        for &r in &rows[..absent] {
            presence[r * m + i] = false;
        }
    }

    let mut rng = seeded(derive_seed(seed, 99));
    let count = |p: &[bool], r: usize| p[r * m..(r + 1) * m].iter().filter(|&&x| x).count();
    for r in 0..len {
        if count(&presence, r) > 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let swap = order.into_iter().find_map(|i| {
            let donors: Vec<usize> = (0..len)
                .filter(|&c| presence[c * m + i] && count(&presence, c) >= 2)
                .collect();
            donors.choose(&mut rng).map(|&c| (i, c))
        });
        let (i, donor) = swap.ok_or_else(|| {
            Error::InvalidConfig("mask repair found no donor row".into())
        })?;
        presence[r * m + i] = true;
        presence[donor * m + i] = false;
    }
    ModalBatch::new(batch.task, batch.inputs.clone(), presence, batch.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn config(task: Task) -> DatasetConfig {
        DatasetConfig {
            modality_dims: vec![8, 8, 8],
            latent_dim: 6,
            noise_scales: vec![0.3, 0.5, 0.8],
            heteroscedasticity: 0.0,
            task,
            pretrain_samples: 200,
            finetune_samples: 100,
            test_samples: 100,
            seed: 1,
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = config(Task::Regression);
        c.modality_dims = vec![4];
        c.noise_scales = vec![0.1];
        assert!(generate(&c).is_err());
        let mut c = config(Task::Classification { classes: 1 });
        assert!(c.validate().is_err());
        c.task = Task::Regression;
        c.noise_scales[0] = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = config(Task::Classification { classes: 4 });
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a, b);
        let mut c2 = c.clone();
        c2.seed = 2;
        assert_ne!(a.test.inputs, generate(&c2).unwrap().test.inputs);
    }

    #[test]
    fn zero_fraction_keeps_everything() {
        let splits = generate(&config(Task::Regression)).unwrap();
        let masked = apply_masks(&splits.test, 0.0, 3).unwrap();
        assert!(masked.presence().iter().all(|&p| p));
    }

    #[test]
    fn fraction_out_of_range_rejected() {
        let splits = generate(&config(Task::Regression)).unwrap();
        assert!(apply_masks(&splits.test, 1.0, 3).is_err());
        assert!(apply_masks(&splits.test, -0.1, 3).is_err());
    }

    #[test]
    fn two_modalities_half_masked() {
        let mut c = config(Task::Regression);
        c.modality_dims = vec![3, 5];
        c.noise_scales = vec![0.1, 0.1];
        let splits = generate(&c).unwrap();
        for seed in 0..20 {
            let masked = apply_masks(&splits.test, 0.5, seed).unwrap();
            for i in 0..2 {
                let absent = (0..100).filter(|&r| !masked.is_present(r, i)).count();
                assert_eq!(absent, 50);
            }
            assert!((0..100).all(|r| masked.present_count(r) >= 1));
        }
    }

    #[test]
    fn masks_depend_on_seed() {
        let splits = generate(&config(Task::Regression)).unwrap();
        let a = apply_masks(&splits.test, 0.5, 1).unwrap();
        let b = apply_masks(&splits.test, 0.5, 2).unwrap();
        assert_ne!(a.presence(), b.presence());
    }

    #[test]
    fn absent_inputs_are_zero() {
        let splits = generate(&config(Task::Regression)).unwrap();
        let masked = apply_masks(&splits.test, 0.5, 4).unwrap();
        for r in 0..masked.len() {
            for i in 0..3 {
                if !masked.is_present(r, i) {
                    assert!(masked.inputs[i].row(r).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn with_missing_marks_whole_columns() {
        let splits = generate(&config(Task::Regression)).unwrap();
        let b = splits.test.with_missing(&[0, 2]).unwrap();
        assert!((0..b.len()).all(|r| !b.is_present(r, 0) && b.is_present(r, 1) && !b.is_present(r, 2)));
        assert!(splits.test.with_missing(&[0, 1, 2]).is_err());
        assert!(splits.test.with_missing(&[5]).is_err());
    }
}
