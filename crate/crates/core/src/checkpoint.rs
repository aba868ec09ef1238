//! Checkpoints: a directory of per-parameter tensor files plus a JSON
//! manifest recording the encoder configuration, class count, the ordered
//! parameter-path-to-file map, and any attached adapters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: EncoderConfig,
    classes: usize,
    /// (parameter path, tensor file) in model construction order.
    params: Vec<(String, String)>,
    adapters: Vec<LoraAdapter>,
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut entries = Vec::with_capacity(model.params.len());
    for (path, p) in model.params.iter() {
        let file = format!("params/{path}.tsr");
        p.value.save(&dir.join(&file))?;
        entries.push((path.to_string(), file));
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        classes: model.classes,
        params: entries,
        adapters: model.adapters.clone(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join("manifest.json");
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&raw)
        .map_err(|e| Error::Incompatible(format!("{}: {e}", path.display())))?;
    let mut params = ParamStore::new();
    for (param_path, file) in &manifest.params {
        let tensor = Tensor::load(&dir.join(file))?;
        params.insert(param_path.clone(), tensor);
    }
    let mut model = Model::assemble(manifest.config, manifest.classes, params)?;
    model.adapters = manifest.adapters;
    for adapter in &model.adapters {
        for p in [adapter.a_path(), adapter.b_path()] {
            if !model.params.contains(&p) {
                return Err(Error::Incompatible(format!(
                    "manifest lists adapter on {:?} but parameter {p:?} is missing",
                    adapter.target
                )));
            }
        }
    }
    Ok(model)
}
