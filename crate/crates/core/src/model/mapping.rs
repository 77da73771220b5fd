//! Mapping network placed in front of the U-Net: a residual 3-D convolution
//! followed by layer-normalized attention over frames. Both output layers
//! start at zero, so the block is the identity until trained.

use candle_core::Tensor;

use super::blocks::TemporalAttention;
use super::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Conv3d, Init, ParamGroup};

pub(crate) struct MappingNetwork {
    conv_a: Conv3d,
    conv_b: Conv3d,
    attn: TemporalAttention,
}

impl MappingNetwork {
    pub fn new(ini: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        ini.group(ParamGroup::Mapping, "mapping");
        Ok(Self {
            conv_a: ini.conv3d("conv3d_a", cfg.channels, cfg.mapping_hidden, false)?,
            conv_b: ini.conv3d("conv3d_b", cfg.mapping_hidden, cfg.channels, true)?,
            attn: TemporalAttention::new(ini, "temporal_attn", cfg.channels, cfg.mapping_hidden, 1)?,
        })
    }

    /// `x`: channels-last `(B, F, H, W, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f, h, w, c) = x.dims5()?;
        let residual = self.conv_b.forward(&self.conv_a.forward(x)?.silu()?)?;
        let block = (x + &residual)?;
        let seq = block
            .reshape((b, f, h * w, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * h * w, f, c))?;
        let attended = self
            .attn
            .branch(&seq)?
            .reshape((b, h * w, f, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, f, h, w, c))?;
        Ok((block + attended)?)
    }
}
