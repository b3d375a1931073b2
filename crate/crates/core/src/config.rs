//! Run configuration files with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{downscale, load_transforms, select_few_shot, SceneDataset, ViewSelector};
use crate::error::{Error, Result};
use crate::eval::EntropyReportConfig;
use crate::field::ModelConfig;
use crate::infoloss::LossWeights;
use crate::render::SamplingConfig;
use crate::train::{ScheduleConfig, TrainConfig, TrainSetup};

/// File the resolved configuration is written to inside a run directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `transforms_<split>.json`.
    pub scene: PathBuf,
    pub train_split: String,
    pub test_split: String,
    /// Few-shot subset size; all training frames when unset.
    pub views: Option<usize>,
    /// Seed for the few-shot subset when `view_indices` is unset.
    pub view_seed: u64,
    pub view_indices: Option<Vec<usize>>,
    /// Overrides the transforms file's background setting.
    pub white_background: Option<bool>,
    pub downscale: usize,
    /// Copy near, far and background from the dataset into the sampling
    /// section.
    pub bounds_from_dataset: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: PathBuf::from("scene"),
            train_split: "train".into(),
            test_split: "test".into(),
            views: None,
            view_seed: 0,
            view_indices: None,
            white_background: None,
            downscale: 1,
            bounds_from_dataset: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rays rendered per parallel chunk.
    pub chunk: usize,
    pub entropy: EntropyReportConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            chunk: 4096,
            entropy: EntropyReportConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(config_error)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` (defaults when `None`) and applies `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides)
    }

    /// Applies `section.field=value` assignments. The path must already exist
    /// in the fully defaulted document; values parse as JSON, falling back to
    /// a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).map_err(config_error)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        if self.data.downscale == 0 {
            return Err(Error::Config("data.downscale must be >= 1".into()));
        }
        if self.eval.chunk == 0 {
            return Err(Error::Config("eval.chunk must be >= 1".into()));
        }
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model,
            sampling: self.sampling,
            losses: self.losses,
            train: self.train,
            schedule: self.schedule,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn transforms_path(&self, split: &str) -> PathBuf {
        self.data.scene.join(format!("transforms_{split}.json"))
    }

    /// Loads the training split, applies the few-shot subset and downscale,
    /// and copies the dataset bounds into `sampling` when requested.
    pub fn load_train(&mut self) -> Result<SceneDataset> {
        let path = self.transforms_path(&self.data.train_split.clone());
        let mut ds = load_transforms(&path, self.data.white_background)?;
        if let Some(k) = self.data.views {
            let selector = match &self.data.view_indices {
                Some(idx) => ViewSelector::Explicit(idx.clone()),
                None => ViewSelector::Seed(self.data.view_seed),
            };
            ds = select_few_shot(&ds, k, &selector)?;
        }
        self.finish_dataset(ds)
    }

    pub fn load_test(&mut self) -> Result<SceneDataset> {
        let path = self.transforms_path(&self.data.test_split.clone());
        let ds = load_transforms(&path, self.data.white_background)?;
        self.finish_dataset(ds)
    }

    fn finish_dataset(&mut self, ds: SceneDataset) -> Result<SceneDataset> {
        let ds = if self.data.downscale > 1 {
            downscale(&ds, self.data.downscale)?
        } else {
            ds
        };
        if self.data.bounds_from_dataset {
            self.sampling.near = ds.near;
            self.sampling.far = ds.far;
            self.sampling.white_background = ds.white_background;
        }
        self.sampling.validate()?;
        Ok(ds)
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("{} is not a section", parts[..i].join(".")))
        })?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::Config(format!("empty config key {key:?}")))
}
