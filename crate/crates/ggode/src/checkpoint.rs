//! Model checkpoints: named parameter matrices with the model configuration
//! and input normalization, in the binary container.

use std::path::Path;

use ggode_core::datagen::NormStats;
use ggode_core::model::{Model, ModelConfig};
use ggode_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadBuilder, Span};
use crate::error::{Error, Result};

const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    stats: NormStats,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut payload = PayloadBuilder::default();
    let params = model
        .store
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: payload.push(t.data()),
        })
        .collect();
    let header = CheckpointHeader {
        config: model.config.clone(),
        stats: model.stats.clone(),
        params,
    };
    container::write_file(path, CHECKPOINT_KIND, header, &payload.finish())
}

/// Rebuild the model from its configuration, then overwrite every parameter
/// by name. Missing, extra or reshaped parameters are errors.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (header, payload): (CheckpointHeader, Vec<f64>) = container::read_file(path, CHECKPOINT_KIND)?;
    let mut model = Model::new(header.config, header.stats, 0)?;
    if header.params.len() != model.store.len() {
        return Err(Error::format(format!(
            "checkpoint has {} parameters, model expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for entry in &header.params {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::format(format!("unknown parameter {}", entry.name)))?;
        if model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::format(format!(
                "parameter {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                model.store.get(id).shape()
            )));
        }
        let t = Tensor::new(entry.shape.clone(), entry.data.slice(&payload)?.to_vec())?;
        model.store.set(&entry.name, t)?;
    }
    Ok(model)
}
