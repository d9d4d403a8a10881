//! Run configuration: everything needed to reproduce a run from a seed.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::synth::SceneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub components: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Base seed of the scene seeds; eval scenes follow the training ones.
    pub seed: u64,
    pub codec_seed: u64,
    pub tag_scale: f64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            components: 4,
            train_scenes: 512,
            eval_scenes: 8,
            seed: 0,
            codec_seed: 17,
            tag_scale: 0.1,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub cond_drop: f64,
    /// Trailing window of the smoothed loss.
    pub smoothing: usize,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 4, cond_drop: 0.1, smoothing: 25, optim: OptimConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Voxel resolution of self-IoU; `0` picks 64 in 3D and 256 in 2D.
    pub iou_resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self { steps: s.steps, cfg_scale: s.cfg_scale, iou_resolution: 0 }
    }
}

impl EvalConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.steps, cfg_scale: self.cfg_scale }
    }

    pub fn resolution(&self, dim: usize) -> usize {
        match (self.iou_resolution, dim) {
            (0, 2) => 256,
            (0, _) => 64,
            (r, _) => r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Training steps of each ablation run.
    pub ablate_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate_steps: 400,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.optim.validate()?;
        let d = &self.data;
        if d.components < 2 || d.components > self.model.codebook_size {
            return Err(Error::Config(format!("data.components {} outside 2..={}", d.components, self.model.codebook_size)));
        }
        if d.train_scenes == 0 || d.eval_scenes == 0 {
            return Err(Error::Config("data.train_scenes and data.eval_scenes must be positive".into()));
        }
        if d.scene.grid != self.model.grid {
            return Err(Error::Config(format!("data.scene.grid {} differs from model.grid {}", d.scene.grid, self.model.grid)));
        }
        if self.model.latent_dim < d.scene.dim + 1 {
            return Err(Error::Config(format!("model.latent_dim {} cannot hold {} coordinates and a tag", self.model.latent_dim, d.scene.dim)));
        }
        if self.train.batch == 0 || self.train.smoothing == 0 {
            return Err(Error::Config("train.batch and train.smoothing must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.cond_drop) {
            return Err(Error::Config(format!("train.cond_drop {} outside [0, 1]", self.train.cond_drop)));
        }
        if self.eval.steps == 0 {
            return Err(Error::Config("eval.steps must be positive".into()));
        }
        Ok(())
    }

    /// Parses a JSON config; missing keys take defaults, unknown keys fail.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides with dotted keys such as
    /// `model.router.k_fraction=0.5`. Values parse as JSON, else as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override {:?} is not key=value", o.as_ref())))?;
            set_path(&mut value, key.trim(), raw.trim())?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key {key:?}"));
    let mut slot = root;
    for part in key.split('.') {
        slot = slot.as_object_mut().and_then(|m| m.get_mut(part)).ok_or_else(unknown)?;
    }
    if slot.is_object() {
        return Err(Error::Config(format!("config key {key:?} names a section, not a value")));
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
