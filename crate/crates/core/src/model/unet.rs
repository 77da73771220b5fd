//! The per-frame image U-Net (the frozen spatial model) and the temporal
//! layers interleaved with it when the model runs in video mode.

use candle_core::Tensor;

use super::blocks::{avg_pool2, upsample2, AttnCapture, CrossContext, ResBlock, SpatialTransformer, TemporalAttention};
use super::config::ModelConfig;
use crate::error::Result;
use crate::nn::{norm_groups, sinusoidal_table, Conv2d, Init, Linear, Norm, ParamGroup};

struct Level {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
    resample: Option<Conv2d>,
}

pub(crate) struct SpatialUNet {
    time_dim: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid_res1: ResBlock,
    mid_attn: SpatialTransformer,
    mid_res2: ResBlock,
    /// Ordered from the bottleneck upwards.
    up: Vec<Level>,
    out_norm: Norm,
    out_groups: usize,
    out_conv: Conv2d,
    transformer_count: usize,
}

/// One temporal layer after every encoder level, the middle block and every
/// decoder level.
pub(crate) struct TemporalStack {
    down: Vec<TemporalAttention>,
    mid: TemporalAttention,
    up: Vec<TemporalAttention>,
}

/// Everything the U-Net records on a captured forward, in decoder order
/// (nearest the bottleneck first).
pub(crate) struct UNetCapture {
    pub decoder: Vec<AttnCapture>,
    pub h: Tensor,
}

impl SpatialUNet {
    pub fn new(ini: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        ini.group(ParamGroup::Spatial, "unet");
        let ch = &cfg.unet_channels;
        let levels = ch.len();
        let time_dim = ch[0].max(2);
        let emb = 4 * ch[0];
        let mut gate = 0;
        let mut next_gate = || {
            gate += 1;
            gate - 1
        };
        let time1 = ini.linear("time1", time_dim, emb, true)?;
        let time2 = ini.linear("time2", emb, emb, true)?;
        let conv_in = ini.conv2d("conv_in", cfg.channels, ch[0], 3)?;
        let mut down = Vec::with_capacity(levels);
        let mut prev = ch[0];
        for (l, &c) in ch.iter().enumerate() {
            let res = ResBlock::new(ini, &format!("down{l}.res"), prev, c, emb)?;
            let attn = if cfg.level_has_attention(l) {
                Some(SpatialTransformer::new(ini, &format!("down{l}.attn"), c, cfg.token_dim, cfg.heads, next_gate())?)
            } else {
                None
            };
            let resample = if l + 1 < levels {
                Some(ini.conv2d(&format!("down{l}.downsample"), c, c, 3)?)
            } else {
                None
            };
            down.push(Level { res, attn, resample });
            prev = c;
        }
        let cb = ch[levels - 1];
        let mid_res1 = ResBlock::new(ini, "mid.res1", cb, cb, emb)?;
        let mid_attn = SpatialTransformer::new(ini, "mid.attn", cb, cfg.token_dim, cfg.heads, next_gate())?;
        let mid_res2 = ResBlock::new(ini, "mid.res2", cb, cb, emb)?;
        let mut up = Vec::with_capacity(levels);
        let mut cur = cb;
        for l in (0..levels).rev() {
            let c = ch[l];
            let res = ResBlock::new(ini, &format!("up{l}.res"), cur + c, c, emb)?;
            let attn = if cfg.level_has_attention(l) {
                Some(SpatialTransformer::new(ini, &format!("up{l}.attn"), c, cfg.token_dim, cfg.heads, next_gate())?)
            } else {
                None
            };
            let resample = if l > 0 {
                Some(ini.conv2d(&format!("up{l}.upsample"), c, c, 3)?)
            } else {
                None
            };
            up.push(Level { res, attn, resample });
            cur = c;
        }
        let out_norm = ini.norm("out_norm", ch[0])?;
        let out_conv = ini.conv2d("out_conv", ch[0], cfg.channels, 3)?;
        Ok(Self {
            time_dim,
            time1,
            time2,
            conv_in,
            down,
            mid_res1,
            mid_attn,
            mid_res2,
            up,
            out_norm,
            out_groups: norm_groups(ch[0]),
            out_conv,
            transformer_count: gate,
        })
    }

    /// Number of spatial transformers, which is also the number of
    /// frame-wise token gates.
    pub fn transformer_count(&self) -> usize {
        self.transformer_count
    }

    fn time_embedding(&self, timesteps: &[usize], like: &Tensor) -> Result<Tensor> {
        let positions: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let table = sinusoidal_table(&positions, self.time_dim, like.dtype())?;
        self.time2.forward(&self.time1.forward(&table)?.silu()?)
    }

    /// `x`: `(N, H, W, C)` frames; `timesteps` has one entry per frame.
    /// With `temporal = Some((stack, F))` the frames are treated as videos of
    /// `F` consecutive entries and the temporal layers are applied.
    pub fn forward(
        &self,
        x: &Tensor,
        timesteps: &[usize],
        ctx: &CrossContext,
        temporal: Option<(&TemporalStack, usize)>,
        capture: bool,
    ) -> Result<(Tensor, Option<UNetCapture>)> {
        let emb = self.time_embedding(timesteps, x)?;
        let motion = |layer: &TemporalAttention, h: Tensor| -> Result<Tensor> {
            match temporal {
                Some((_, frames)) => layer.forward(&h, frames),
                None => Ok(h),
            }
        };

        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, level) in self.down.iter().enumerate() {
            h = level.res.forward(&h, &emb)?;
            if let Some(attn) = &level.attn {
                h = attn.forward(&h, ctx, false)?.0;
            }
            if let Some((stack, _)) = temporal {
                h = motion(&stack.down[l], h)?;
            }
            skips.push(h.clone());
            if let Some(conv) = &level.resample {
                h = conv.forward(&avg_pool2(&h)?)?;
            }
        }

        h = self.mid_res1.forward(&h, &emb)?;
        h = self.mid_attn.forward(&h, ctx, false)?.0;
        if let Some((stack, _)) = temporal {
            h = motion(&stack.mid, h)?;
        }
        h = self.mid_res2.forward(&h, &emb)?;
        let bottleneck = h.clone();

        let mut decoder = Vec::new();
        for (i, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = level.res.forward(&Tensor::cat(&[&h, &skip], 3)?, &emb)?;
            if let Some(attn) = &level.attn {
                let (out, cap) = attn.forward(&h, ctx, capture)?;
                h = out;
                decoder.extend(cap);
            }
            if let Some((stack, _)) = temporal {
                h = motion(&stack.up[i], h)?;
            }
            if let Some(conv) = &level.resample {
                h = conv.forward(&upsample2(&h)?)?;
            }
        }

        let out = self
            .out_conv
            .forward(&self.out_norm.group_norm(&h, self.out_groups)?.silu()?)?;
        let cap = capture.then_some(UNetCapture {
            decoder,
            h: bottleneck,
        });
        Ok((out, cap))
    }
}

impl TemporalStack {
    pub fn new(ini: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        ini.group(ParamGroup::Temporal, "motion");
        let ch = &cfg.unet_channels;
        let down = ch
            .iter()
            .enumerate()
            .map(|(l, &c)| TemporalAttention::new(ini, &format!("down{l}"), c, c, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let cb = *ch.last().expect("validated");
        let mid = TemporalAttention::new(ini, "mid", cb, cb, cfg.heads)?;
        let up = (0..ch.len())
            .rev()
            .map(|l| TemporalAttention::new(ini, &format!("up{l}"), ch[l], ch[l], cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { down, mid, up })
    }
}
