//! Training configuration.
//!
//! On disk the configuration is a flat TOML file whose keys mirror the field
//! names of [`TrainConfig`]. Missing keys take their default values.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ShapeKind;
use crate::error::{Error, Result};

/// Which proposals contribute keys and queries to the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Base,
    Novel,
    All,
}

impl Supervision {
    pub fn admits(self, is_base: bool) -> bool {
        match self {
            Supervision::Base => is_base,
            Supervision::Novel => !is_base,
            Supervision::All => true,
        }
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Supervision::Base),
            "novel" => Ok(Supervision::Novel),
            "all" => Ok(Supervision::All),
            _ => Err(Error::Parse(format!("unknown supervision '{s}'"))),
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::Base => "base",
            Supervision::Novel => "novel",
            Supervision::All => "all",
        })
    }
}

/// Whether gradients flow from the contrastive loss into the shared queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryGradient {
    Stop,
    Flow,
}

impl FromStr for QueryGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stop" => Ok(QueryGradient::Stop),
            "flow" => Ok(QueryGradient::Flow),
            _ => Err(Error::Parse(format!("unknown query_gradient '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Parse(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // dataset
    pub image_size: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub base_categories: Vec<ShapeKind>,
    pub novel_categories: Vec<ShapeKind>,
    pub data_seed: u64,
    pub roi_jitter: f64,
    pub hflip: bool,

    // model
    pub roi_resolution: usize,
    pub channels: usize,
    pub backbone_blocks: usize,
    pub encoder_blocks: usize,
    pub projector_layers: usize,

    // contrastive loss
    pub delta: f64,
    pub sigma: f64,
    pub tau_easy: f64,
    pub tau_hard: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub warmup_fraction: f64,

    // optimization
    pub epochs: usize,
    /// Stop after this many steps; 0 means run all epochs.
    pub max_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write a checkpoint every n steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub eval_every_epoch: bool,

    // ablation switches
    pub use_cl: bool,
    pub use_cam: bool,
    pub supervision: Supervision,
    pub query_sharing: bool,
    pub query_gradient: QueryGradient,
    pub oracle_novel_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        use ShapeKind::*;
        TrainConfig {
            image_size: 64,
            train_scenes: 200,
            val_scenes: 60,
            base_categories: vec![Disk, Square, Triangle, Ring],
            novel_categories: vec![Cross, Star, Crescent, Ellipse],
            data_seed: 0,
            roi_jitter: 0.1,
            hflip: true,

            roi_resolution: 28,
            channels: 16,
            backbone_blocks: 3,
            encoder_blocks: 8,
            projector_layers: 3,

            delta: 0.1,
            sigma: 0.3,
            tau_easy: 0.7,
            tau_hard: 0.3,
            lambda_start: 0.25,
            lambda_end: 1.0,
            warmup_fraction: 0.5,

            epochs: 6,
            max_steps: 0,
            batch_size: 16,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 0,
            eval_every_epoch: true,

            use_cl: true,
            use_cam: true,
            supervision: Supervision::All,
            query_sharing: true,
            query_gradient: QueryGradient::Stop,
            oracle_novel_masks: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// All categories, base first, in configuration order. The position in
    /// this list is the class id used by the classifier.
    pub fn categories(&self) -> Vec<ShapeKind> {
        self.base_categories
            .iter()
            .chain(self.novel_categories.iter())
            .copied()
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.base_categories.len() + self.novel_categories.len()
    }

    pub fn class_id(&self, kind: ShapeKind) -> Option<usize> {
        self.categories().iter().position(|&k| k == kind)
    }

    pub fn is_base(&self, kind: ShapeKind) -> bool {
        self.base_categories.contains(&kind)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.base_categories.is_empty() || self.novel_categories.is_empty() {
            return err("base and novel category sets must both be nonempty".into());
        }
        for k in &self.base_categories {
            if self.novel_categories.contains(k) {
                return err(format!("category {k} is both base and novel"));
            }
        }
        let all = self.categories();
        for (i, k) in all.iter().enumerate() {
            if all[..i].contains(k) {
                return err(format!("category {k} listed twice"));
            }
        }
        if self.image_size < 16 {
            return err("image_size must be at least 16".into());
        }
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return err("scene counts must be positive".into());
        }
        if !(0.0..=0.2).contains(&self.roi_jitter) {
            return err(format!("roi_jitter {} outside [0, 0.2]", self.roi_jitter));
        }
        if self.roi_resolution < 2 || self.channels == 0 {
            return err("roi_resolution must be >= 2 and channels > 0".into());
        }
        if self.backbone_blocks == 0 || self.encoder_blocks == 0 || self.projector_layers == 0 {
            return err("layer counts must be positive".into());
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return err(format!("delta {} outside (0, 0.5)", self.delta));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return err(format!("sigma {} outside (0, 1]", self.sigma));
        }
        if !(self.tau_easy > 0.0 && self.tau_hard > 0.0) {
            return err("temperatures must be positive".into());
        }
        if !(self.lambda_start >= 0.0 && self.lambda_end >= self.lambda_start) {
            return err("lambda schedule must satisfy 0 <= start <= end".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return err(format!(
                "warmup_fraction {} outside (0, 1]",
                self.warmup_fraction
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch_size and epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return err("learning_rate must be positive".into());
        }
        Ok(())
    }

    /// Apply a single `key = value` override, as used by ablation sweeps.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml_string())?;
        let current = table
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        let parsed = match current {
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            toml::Value::Boolean(_) => toml::Value::Boolean(
                value
                    .parse()
                    .map_err(|_| Error::Parse(format!("{key}: expected bool, got '{value}'")))?,
            ),
            toml::Value::Integer(_) => toml::Value::Integer(
                value
                    .parse()
                    .map_err(|_| Error::Parse(format!("{key}: expected integer, got '{value}'")))?,
            ),
            toml::Value::Float(_) => toml::Value::Float(
                value
                    .parse()
                    .map_err(|_| Error::Parse(format!("{key}: expected number, got '{value}'")))?,
            ),
            _ => {
                let v: toml::Table = toml::from_str(&format!("v = {value}"))?;
                v["v"].clone()
            }
        };
        table.insert(key.to_string(), parsed);
        let updated: TrainConfig = table.try_into()?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}
