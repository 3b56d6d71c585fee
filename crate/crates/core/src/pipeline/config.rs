use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::models::{Arch, ModelConfig, WidthMult};
use crate::pooling::PoolHeadKind;
use crate::synthdata::Task;

/// Everything a run needs. Unset fields in a TOML file take the defaults
/// below; `--set key=value` overrides single fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub arch: Arch,
    pub width_mult: WidthMult,
    #[serde(with = "pool_head_text")]
    pub pool_head: PoolHeadKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Warm-start checkpoint (trunk only).
    pub pretrained_checkpoint: Option<PathBuf>,
    /// Teacher model for distillation.
    pub teacher: Option<PathBuf>,
    pub temperature: f64,
    pub kd_lambda: f64,
    pub n_mels: usize,
    pub clip_seconds: f64,
    /// Keep only this many training clips per class (low-data runs).
    pub train_per_class: Option<usize>,
    /// Clips per class generated by `synth`.
    pub n_per_class: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Classify,
            arch: Arch::Cnn10,
            width_mult: WidthMult::new(1, 8).expect("valid"),
            pool_head: PoolHeadKind::Statistic,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 1,
            pretrained_checkpoint: None,
            teacher: None,
            temperature: 2.0,
            kd_lambda: 0.5,
            n_mels: 64,
            clip_seconds: 2.0,
            train_per_class: None,
            n_per_class: 100,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

mod pool_head_text {
    use super::PoolHeadKind;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &PoolHeadKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&k.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PoolHeadKind, D::Error> {
        let s = String::deserialize(d)?;
        PoolHeadKind::parse(&s).ok_or_else(|| D::Error::custom(format!("unknown pool head {s:?}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML text; loading it reproduces this config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a `key=value` override. The value is read as a TOML literal,
    /// falling back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<(), PipelineError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("expected key=value, got {assignment:?}")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut table = toml::Value::try_from(&*self)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let map = table.as_table_mut().expect("config is a table");
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        if raw.is_empty() || raw == "none" {
            map.remove(key);
        } else {
            map.insert(key.to_string(), value);
        }
        let updated: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.kd_lambda) {
            return err("kd_lambda must be in [0, 1]");
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) {
            return err("clip_seconds must be positive");
        }
        if self.train_per_class == Some(0) || self.n_per_class == 0 {
            return err("per-class counts must be positive");
        }
        self.model_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn n_classes(&self) -> usize {
        self.task.label_set().len()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.arch, self.width_mult, self.n_classes())
            .with_mels(self.n_mels)
            .with_pool_head(self.pool_head)
    }

    /// Named sub-seed (`"init"`, `"shuffle"`, `"data"`, ...) derived from the run seed.
    pub fn sub_seed(&self, name: &str) -> u64 {
        sub_seed(self.seed, name)
    }
}

pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut x = seed ^ ((crc32fast::hash(name.as_bytes()) as u64) << 32);
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
