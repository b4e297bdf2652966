use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON companion of a binary checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub params: Vec<ParamEntry>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub val_mrr: f64,
}

/// `best.bin` → `best.json`.
pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn save_checkpoint(bin: &Path, model: &Model, manifest: &CheckpointManifest) -> Result<()> {
    let file = File::create(bin).map_err(|e| Error::file(bin, e))?;
    let mut w = BufWriter::new(file);
    model.params.write_to(&mut w).map_err(|e| Error::file(bin, e))?;
    w.flush().map_err(|e| Error::file(bin, e))?;
    let json = manifest_path(bin);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::file(&json, e))
}

pub fn manifest_for(model: &Model, train: &TrainConfig, vocab: &Vocabulary, epoch: usize, val_mrr: f64) -> CheckpointManifest {
    CheckpointManifest {
        params: model
            .params
            .shapes()
            .into_iter()
            .map(|(name, shape)| ParamEntry { name, shape })
            .collect(),
        model: model.cfg.clone(),
        train: train.clone(),
        vocab: vocab.clone(),
        epoch,
        val_mrr,
    }
}

/// Rebuilds the model described by the manifest next to `bin` and loads
/// the parameter values.
pub fn load_checkpoint(bin: &Path) -> Result<(Model, CheckpointManifest)> {
    let json = manifest_path(bin);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::file(&json, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: json.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut model = Model::new(manifest.model.clone(), 0)?;
    let expected: Vec<ParamEntry> = model
        .params
        .shapes()
        .into_iter()
        .map(|(name, shape)| ParamEntry { name, shape })
        .collect();
    if expected != manifest.params {
        return Err(Error::ManifestMismatch(format!(
            "{} lists {} parameters that do not match the model configuration",
            json.display(),
            manifest.params.len()
        )));
    }
    let file = File::open(bin).map_err(|e| Error::file(bin, e))?;
    model.params.read_values_from(&mut BufReader::new(file))?;
    Ok((model, manifest))
}
