//! Single-file checkpoints: safetensors weights plus one metadata entry
//! holding the format tag, iteration counter and config snapshot.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT_VERSION: &str = "sketchkp-checkpoint/1";
const META_KEY: &str = "sketchkp";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    iteration: usize,
    config: RunConfig,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig, iteration: usize) -> Self {
        let params = model
            .store
            .iter()
            .map(|(name, var)| (name.clone(), var.as_tensor().clone()))
            .collect();
        Self {
            config: config.clone(),
            iteration,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT_VERSION.to_string(),
            iteration: self.iteration,
            config: self.config.clone(),
        };
        let meta = HashMap::from([(
            META_KEY.to_string(),
            serde_json::to_string(&header).expect("header serializes"),
        )]);
        safetensors::serialize(self.params.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, metadata) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        let text = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format `{}` (expected `{FORMAT_VERSION}`)",
                header.format
            )));
        }
        let params = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self {
            config: header.config,
            iteration: header.iteration,
            params,
        })
    }

    /// Writes through a temporary sibling and renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model described by the stored config and loads the
    /// weights. Every parameter must be present with a matching shape.
    pub fn into_model(&self, dtype: DType) -> Result<Model> {
        let mut cfg = self.config.clone();
        cfg.encoder.weights = None;
        let model = Model::new(&cfg, dtype)?;
        for (name, _) in model.store.iter() {
            let value = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")))?;
            model.store.assign(name, value)?;
        }
        if let Some(extra) = self.params.keys().find(|k| model.store.get(k).is_none()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint parameter `{extra}` does not belong to the configured model"
            )));
        }
        Ok(model)
    }
}
