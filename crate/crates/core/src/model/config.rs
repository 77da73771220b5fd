use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point precision of the model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Architecture hyperparameters of the toy text-to-video network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Frames per clip.
    pub frames: usize,
    /// Text token slots `M`.
    pub max_tokens: usize,
    /// Token embedding width `D`.
    pub token_dim: usize,
    /// Frame-wise tokens per frame `K`.
    pub frame_tokens: usize,
    /// Channel width of each U-Net level, top to bottom.
    pub unet_channels: Vec<usize>,
    /// Number `N` of decoder levels (counted from the bottleneck) that carry
    /// self-attention.
    pub attention_layers: usize,
    pub heads: usize,
    /// Hidden width of the mapping network's convolution and attention.
    pub mapping_hidden: usize,
    pub queue_capacity: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            frames: 8,
            max_tokens: 16,
            token_dim: 64,
            frame_tokens: 3,
            unet_channels: vec![16, 32, 32],
            attention_layers: 2,
            heads: 2,
            mapping_hidden: 16,
            queue_capacity: 512,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// A configuration small enough for unit tests.
    pub fn tiny() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 3,
            frames: 3,
            max_tokens: 5,
            token_dim: 8,
            frame_tokens: 2,
            unet_channels: vec![4, 8],
            attention_layers: 2,
            heads: 2,
            mapping_hidden: 4,
            queue_capacity: 16,
            seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn levels(&self) -> usize {
        self.unet_channels.len()
    }

    /// Spatial size of the bottleneck feature map.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let s = 1 << (self.levels() - 1);
        (self.height / s, self.width / s)
    }

    /// Channel count of the bottleneck feature map.
    pub fn bottleneck_channels(&self) -> usize {
        *self.unet_channels.last().expect("validated non-empty")
    }

    /// Whether U-Net level `level` (0 = full resolution) has attention.
    pub fn level_has_attention(&self, level: usize) -> bool {
        level + self.attention_layers >= self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 1 {
            return bad("frames must be >= 1".into());
        }
        if self.max_tokens < 1 {
            return bad("max_tokens must be >= 1".into());
        }
        if self.token_dim < 1 || self.channels < 1 || self.mapping_hidden < 1 {
            return bad("token_dim, channels and mapping_hidden must be positive".into());
        }
        if self.unet_channels.is_empty() || self.unet_channels.contains(&0) {
            return bad("unet_channels must be non-empty and positive".into());
        }
        if self.attention_layers < 1 || self.attention_layers > self.levels() {
            return bad(format!(
                "attention_layers must be in 1..={} for {} U-Net levels",
                self.levels(),
                self.levels()
            ));
        }
        if self.heads < 1 || self.unet_channels.iter().any(|c| c % self.heads != 0) {
            return bad("every U-Net width must be divisible by heads".into());
        }
        let s = 1 << (self.levels() - 1);
        if self.height % s != 0 || self.width % s != 0 || self.height < s || self.width < s {
            return bad(format!(
                "frame size {}x{} must be divisible by {s} for {} levels",
                self.height,
                self.width,
                self.levels()
            ));
        }
        if self.queue_capacity < 1 {
            return bad("queue_capacity must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::tiny();
        c.attention_layers = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.height = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.frames = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.max_tokens = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"height": 8, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"frame_tokens": 0}"#).unwrap();
        assert_eq!(ok.frame_tokens, 0);
        assert_eq!(ok.height, 32);
    }
}
