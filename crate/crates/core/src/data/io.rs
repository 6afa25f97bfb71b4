use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetConfig, ModalBatch, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SPLITS: [&str; 3] = ["pretrain", "finetune", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub seed: u64,
    pub version: String,
}

fn write_matrix(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if !e.is_io_error() {
        return e.into();
    }
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        _ => unreachable!("checked is_io_error"),
    }
}

fn tensor_rows(t: &Tensor) -> impl Iterator<Item = Vec<String>> + '_ {
    (0..t.rows()).map(move |r| t.row(r).iter().map(|v| v.to_string()).collect())
}

fn read_matrix(path: &Path) -> Result<(usize, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    for record in r.records() {
        for field in record?.iter() {
            data.push(field.parse::<f64>().map_err(|e| {
                Error::InvalidConfig(format!("{}: bad number {field:?}: {e}", path.display()))
            })?);
        }
    }
    Ok((cols, data))
}

fn write_split(dir: &Path, batch: &ModalBatch) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, x) in batch.inputs.iter().enumerate() {
        let header: Vec<String> = (0..x.cols()).map(|c| format!("x{c}")).collect();
        write_matrix(&dir.join(format!("modality_{i}.csv")), &header, tensor_rows(x))?;
    }
    let m = batch.modality_count();
    let header: Vec<String> = (0..m).map(|i| format!("m{i}")).collect();
    let masks = batch
        .presence()
        .chunks(m)
        .map(|row| row.iter().map(|&p| u8::from(p).to_string()).collect());
    write_matrix(&dir.join("mask.csv"), &header, masks)?;
    let header: Vec<String> = (0..batch.labels.cols()).map(|c| format!("y{c}")).collect();
    write_matrix(&dir.join("labels.csv"), &header, tensor_rows(&batch.labels))
}

fn read_split(dir: &Path, config: &DatasetConfig) -> Result<ModalBatch> {
    let (label_cols, labels) = read_matrix(&dir.join("labels.csv"))?;
    let len = labels.len() / label_cols.max(1);
    let labels = Tensor::matrix(len, label_cols, labels)?;
    let inputs = (0..config.modality_count())
        .map(|i| {
            let (cols, data) = read_matrix(&dir.join(format!("modality_{i}.csv")))?;
            Ok(Tensor::matrix(data.len() / cols.max(1), cols, data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, mask) = read_matrix(&dir.join("mask.csv"))?;
    let presence = mask.into_iter().map(|v| v != 0.0).collect();
    ModalBatch::new(config.task, inputs, presence, labels)
}

/// Writes one directory per split plus `manifest.json` at the root.
pub fn export_dataset(dir: &Path, config: &DatasetConfig, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, batch) in SPLITS.iter().zip([&splits.pretrain, &splits.finetune, &splits.test]) {
        write_split(&dir.join(name), batch)?;
    }
    let manifest = DatasetManifest {
        config: config.clone(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn import_dataset(dir: &Path) -> Result<(DatasetConfig, Splits)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let config = manifest.config;
    config.validate()?;
    let splits = Splits {
        pretrain: read_split(&dir.join(SPLITS[0]), &config)?,
        finetune: read_split(&dir.join(SPLITS[1]), &config)?,
        test: read_split(&dir.join(SPLITS[2]), &config)?,
    };
    Ok((config, splits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_masks, generate, Task};

    #[test]
    fn export_import_round_trip() {
        let config = crate::data::tests::config(Task::Classification { classes: 3 });
        let mut splits = generate(&config).unwrap();
        splits.finetune = apply_masks(&splits.finetune, 0.5, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), &config, &splits).unwrap();
        let (c, s) = import_dataset(dir.path()).unwrap();
        assert_eq!(c, config);
        assert_eq!(s, splits);
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(import_dataset(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
