//! The run configuration: one JSON document with `model`, `schedule`,
//! `train`, `sampler` and `data` sections. Missing sections and fields take
//! their defaults; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative manifest paths resolve
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DataConfig::Manifest { path: m } = &mut cfg.data {
            if m.is_relative() {
                if let Some(base) = path.parent() {
                    *m = base.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if let DataConfig::Synthetic { clips: 0, .. } = self.data {
            return Err(Error::Config("synthetic data needs at least one clip".into()));
        }
        Ok(())
    }

    /// A small configuration: 500 pretraining and 200 inflation steps take
    /// under ten minutes on one CPU core.
    pub fn smoke() -> Self {
        let model = ModelConfig {
            height: 16,
            width: 16,
            channels: 3,
            frames: 4,
            max_tokens: 8,
            token_dim: 32,
            frame_tokens: 3,
            unet_channels: vec![16, 32],
            attention_layers: 2,
            heads: 2,
            mapping_hidden: 8,
            queue_capacity: 512,
            seed: 0,
            precision: Default::default(),
        };
        Self {
            model,
            data: DataConfig::Synthetic { clips: 4, seed: 0 },
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_sections() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = RunConfig::from_json(r#"{"train": {"steps": 7}, "data": {"source": "synthetic", "clips": 2, "seed": 1}}"#).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.data, DataConfig::Synthetic { clips: 2, seed: 1 });
        RunConfig::smoke().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sampler": {"mg_alpah": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"frames": 0}}"#).is_err());
    }

    #[test]
    fn serializes_round_trip() {
        let cfg = RunConfig::smoke();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn manifest_path_resolves_next_to_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"data": {"source": "manifest", "path": "clips.csv"}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.data, DataConfig::Manifest { path: dir.path().join("clips.csv") });
    }
}
