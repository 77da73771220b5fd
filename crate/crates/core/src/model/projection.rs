use candle_core::Tensor;

use super::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Init, Linear, ParamGroup};

/// Projection head on bottleneck features: a convolution spanning the whole
/// feature map (no bias), then three linear layers with SiLU between.
pub(crate) struct ProjectionHead {
    collapse: Linear,
    fc: [Linear; 3],
}

impl ProjectionHead {
    pub fn new(ini: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        ini.group(ParamGroup::Projection, "projection");
        let c = cfg.bottleneck_channels();
        let (h, w) = cfg.bottleneck_hw();
        Ok(Self {
            collapse: ini.linear("collapse", h * w * c, c, false)?,
            fc: [
                ini.linear("fc0", c, c, true)?,
                ini.linear("fc1", c, c, true)?,
                ini.linear("fc2", c, c, true)?,
            ],
        })
    }

    /// `h`: channels-last `(N, H, W, C)` -> `(N, C)`.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let (n, hh, ww, c) = h.dims4()?;
        let x = self.collapse.forward(&h.reshape((n, hh * ww * c))?)?.silu()?;
        let x = self.fc[0].forward(&x)?.silu()?;
        let x = self.fc[1].forward(&x)?.silu()?;
        self.fc[2].forward(&x)
    }
}
