//! Run configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ModelKind;
use crate::controller::Precision;
use crate::dataset::{DEFAULT_K, DEFAULT_M};
use crate::envs::{Level, RegistryKind};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_EVAL_SEEDS, DEFAULT_ROLLOUTS};
use crate::model::ModelConfig;
use crate::text::ProviderSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub registry: RegistryKind,
    /// Seeds task parameters and descriptor streams.
    pub registry_seed: u64,
    /// Demonstrations per task.
    pub k: usize,
    /// Descriptions per task and level.
    pub m: usize,
    pub levels: Vec<Level>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            registry: RegistryKind::SwitchWorld10,
            registry_seed: 0,
            k: DEFAULT_K,
            m: DEFAULT_M,
            levels: Level::ALL.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Held-out fraction; absent means the family default.
    pub holdout: Option<f64>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { holdout: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rollouts: usize,
    pub seeds: Vec<u64>,
    pub level: Level,
    pub precision: Precision,
    /// Seed of the held-aside expert prompts given to prompt-conditioned baselines.
    pub prompt_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts: DEFAULT_ROLLOUTS,
            seeds: DEFAULT_EVAL_SEEDS.to_vec(),
            level: Level::L0,
            precision: Precision::F64,
            prompt_seed: 0x9e37,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub provider: ProviderSpec,
    /// Initialization and batch-sampling seed.
    pub seed: u64,
    pub eval: EvalConfig,
    /// Not part of the config hash.
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            split: SplitConfig::default(),
            kind: ModelKind::Tenet,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            provider: ProviderSpec::default(),
            seed: 0,
            eval: EvalConfig::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

fn sha256_json<T: Serialize>(v: &T) -> Result<String> {
    // serde_json maps are ordered, so this is canonical
    let value = serde_json::to_value(v)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills dimensions implied by the registry family.
    pub fn resolved(mut self) -> Self {
        let family = self.data.registry.family();
        self.model.state_dim = family.state_dim();
        self.model.action_dim = family.action_dim();
        if let ProviderSpec::Hash { dim } = self.provider {
            self.model.d_z = dim;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let family = self.data.registry.family();
        if self.model.state_dim != family.state_dim() || self.model.action_dim != family.action_dim() {
            return Err(Error::Config(format!(
                "model dims ({}, {}) do not match {} ({}, {})",
                self.model.state_dim,
                self.model.action_dim,
                family,
                family.state_dim(),
                family.action_dim()
            )));
        }
        if self.data.k == 0 || self.data.m == 0 {
            return Err(Error::Config("data.k and data.m must be at least 1".into()));
        }
        if self.data.levels.is_empty() {
            return Err(Error::Config("data.levels must not be empty".into()));
        }
        if !self.data.levels.contains(&self.train.level) {
            return Err(Error::Config(format!(
                "train.level {} is not among the generated levels",
                self.train.level
            )));
        }
        if let Some(f) = self.split.holdout {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("split.holdout must be in (0, 1), got {f}")));
            }
        }
        if self.eval.rollouts == 0 || self.eval.seeds.is_empty() {
            return Err(Error::Config("eval needs at least one rollout and one seed".into()));
        }
        if let ProviderSpec::Hash { dim } = self.provider {
            if dim != self.model.d_z {
                return Err(Error::Config(format!(
                    "hash provider dim {dim} differs from model.d_z {}",
                    self.model.d_z
                )));
            }
        }
        Ok(())
    }

    /// sha256 of the canonical JSON of everything except `output`.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("output");
        }
        sha256_json(&v)
    }

    /// Hash of the settings that determine the dataset.
    pub fn data_hash(&self) -> Result<String> {
        sha256_json(&self.data)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the effective config next to run outputs.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json_pretty()? + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default().resolved();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json_pretty().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash().unwrap(), c.config_hash().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"model": {"d_q": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 3, "data": {"registry": "pointgoal2d-50"}}"#).is_ok());
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            output: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
        assert_eq!(a.config_hash().unwrap().len(), 64);
    }

    #[test]
    fn resolved_sets_family_dims() {
        let mut c = RunConfig::default();
        c.data.registry = RegistryKind::VelTrack;
        assert!(c.validate().is_err());
        let c = c.resolved();
        assert_eq!((c.model.state_dim, c.model.action_dim), (1, 1));
        c.validate().unwrap();
    }
}
