use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "SURE-CKPT-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: bool,
}

/// A JSON document of named parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(module: &impl Parameters) -> Self {
        let tensors = module
            .parameters()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name,
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
                frozen: p.frozen,
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            tensors,
        }
    }

    /// Copies every tensor into `module`, matching by name and shape.
    pub fn restore(&self, module: &mut impl Parameters) -> Result<()> {
        self.check_format()?;
        for p in module.parameters_mut() {
            let stored = self
                .tensors
                .iter()
                .find(|t| t.name == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if stored.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    stored.shape,
                    p.value.shape()
                )));
            }
            *p.value = Tensor::new(stored.shape.clone(), stored.data.clone())?;
        }
        Ok(())
    }

    /// Names of the tensors recorded as frozen.
    pub fn frozen_names(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.frozen)
            .map(|t| t.name.as_str())
            .collect()
    }

    fn check_format(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format {:?}, expected {CHECKPOINT_FORMAT}",
                self.format
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        ckpt.check_format()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};
    use crate::rng::seeded;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = seeded(4);
        let mut mlp = Mlp::new(&[3, 5, 2], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        mlp.freeze();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mlp.json");
        Checkpoint::capture(&mlp).save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.frozen_names().len(), 4);
        let mut other = Mlp::new(&[3, 5, 2], &[Activation::Relu, Activation::Identity], &mut seeded(9)).unwrap();
        loaded.restore(&mut other).unwrap();
        assert_eq!(mlp.fingerprint(), other.fingerprint());
    }

    #[test]
    fn wrong_header_rejected() {
        let mut ckpt = Checkpoint::capture(&Mlp::new(&[1, 1], &[Activation::Identity], &mut seeded(0)).unwrap());
        ckpt.format = "OTHER".into();
        let mut mlp = Mlp::new(&[1, 1], &[Activation::Identity], &mut seeded(0)).unwrap();
        assert!(ckpt.restore(&mut mlp).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let ckpt = Checkpoint::capture(&Mlp::new(&[2, 3], &[Activation::Identity], &mut seeded(0)).unwrap());
        let mut mlp = Mlp::new(&[2, 4], &[Activation::Identity], &mut seeded(0)).unwrap();
        assert!(ckpt.restore(&mut mlp).is_err());
    }
}
