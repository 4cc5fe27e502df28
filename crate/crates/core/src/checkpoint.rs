//! Versioned JSON checkpoints: named parameter arrays, the configuration that
//! produced them, the step counter and optimizer state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::rng_from_seed;
use crate::error::{Error, Result};
use crate::heads::{Model, ModelConfig};
use crate::nn::{Module, Optimizer, Param};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub params: Vec<Param>,
    #[serde(default)]
    pub optimizer: Option<Optimizer>,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &TrainConfig, step: u64, optimizer: Option<&Optimizer>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            config: config.clone(),
            params: model.params().into_iter().cloned().collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(ck.version));
        }
        Ok(ck)
    }

    /// Rebuild the model described by the stored config and copy the stored
    /// parameters into it by name.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(ModelConfig::from(&self.config), &mut rng_from_seed(0));
        let mut by_name: std::collections::HashMap<&str, &Param> =
            self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in model.params_mut() {
            let src = by_name
                .remove(p.name.as_str())
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {}", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::Shape(format!(
                    "parameter {}: stored {:?}, expected {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            p.value.copy_from_slice(&src.value);
            p.zero_grad();
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Parse(format!("unexpected parameter {extra} in checkpoint")));
        }
        Ok(model)
    }
}
