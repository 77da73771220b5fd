//! Training data: synthetic moving-shape clips, manifest-listed PNG clips
//! and the caption vocabulary.

pub mod clips;
pub mod manifest;
pub mod vocab;

use std::path::PathBuf;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use clips::SyntheticSet;
use manifest::{load_manifest, ManifestDataset};

/// Where training clips come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic { clips: usize, seed: u64 },
    Manifest { path: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Synthetic { clips: 4, seed: 0 }
    }
}

/// Indexed clips `(F, C, H, W)` with captions.
#[derive(Debug, Clone)]
pub enum Dataset {
    Synthetic(SyntheticSet),
    Manifest(ManifestDataset),
}

impl Dataset {
    pub fn open(config: &DataConfig, frames: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        Ok(match config {
            DataConfig::Synthetic { clips, seed } => {
                Self::Synthetic(SyntheticSet::generate(*clips, *seed, frames, channels, height, width)?)
            }
            DataConfig::Manifest { path } => Self::Manifest(load_manifest(path, frames, channels, height, width)?),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Synthetic(s) => s.clips.len(),
            Self::Manifest(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Result<(Tensor, String)> {
        match self {
            Self::Synthetic(s) => {
                let c = s
                    .clips
                    .get(index)
                    .ok_or_else(|| crate::Error::param(format!("clip {index} out of range")))?;
                Ok((c.frames.clone(), c.caption.clone()))
            }
            Self::Manifest(m) => m.get(index),
        }
    }
}
