//! Model checkpoints: JSON with every parameter, the model config, a phase
//! tag, and an echo of the run config.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so saving and loading is bitwise lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Phase};
use crate::rng::Rng;
use crate::tensor::Tensor;

const FORMAT: &str = "mculora-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    phase: Phase,
    model_config: ModelConfig,
    adapters: bool,
    config: String,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config: KvConfig,
}

pub fn to_json(model: &Model, config: &KvConfig) -> Result<String> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        phase: model.phase,
        model_config: model.config.clone(),
        adapters: model.has_adapters(),
        config: config.to_text(),
        params: model
            .params
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn from_json(text: &str) -> Result<Checkpoint> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported format {} v{}", file.format, file.version),
        ));
    }
    // Structure only; every value is overwritten below.
    let mut rng = Rng::new(0);
    let mut model = Model::new(file.model_config.clone(), &mut rng)?;
    if file.adapters {
        model.attach_adapters(file.model_config.rank, file.model_config.alpha, &mut rng)?;
    }
    if model.params.len() != file.params.len() {
        return Err(Error::format(
            "checkpoint",
            format!(
                "expected {} parameters, found {}",
                model.params.len(),
                file.params.len()
            ),
        ));
    }
    for entry in file.params {
        let id = model.params.id(&entry.name).ok_or_else(|| {
            Error::format("checkpoint", format!("unknown parameter {}", entry.name))
        })?;
        let t = Tensor::new(entry.shape, entry.data)?;
        if t.shape() != model.params.get(id).shape() {
            return Err(Error::format(
                "checkpoint",
                format!("shape mismatch for {}", entry.name),
            ));
        }
        *model.params.get_mut(id) = t;
    }
    model.phase = file.phase;
    Ok(Checkpoint {
        model,
        config: KvConfig::parse(&file.config)?,
    })
}

pub fn save(model: &Model, config: &KvConfig, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, to_json(model, config)?.as_bytes())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_json(&std::fs::read_to_string(path)?)
}
