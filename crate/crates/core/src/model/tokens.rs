//! Frame-wise token generator: text tokens `(M, D)` to `K` extra tokens per
//! frame, `(F, K, D)`.

use candle_core::Tensor;

use super::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Init, Linear, Param, ParamGroup};

pub(crate) struct FrameTokenGenerator {
    head: Option<Layers>,
    /// One non-negative gate per spatial transformer scaling the frame-wise
    /// tokens' share of the cross-attention softmax. Zero at init.
    gates: Vec<Param>,
    frames: usize,
    per_frame: usize,
}

struct Layers {
    first: Linear,
    /// Kernel-1 convolution across the token axis, `(K*F, M)`.
    expand: Param,
    tail: Vec<Linear>,
}

impl FrameTokenGenerator {
    pub fn new(ini: &mut Init, cfg: &ModelConfig, gate_count: usize) -> Result<Self> {
        ini.group(ParamGroup::TokenGen, "token_gen");
        let d = cfg.token_dim;
        let head = if cfg.frame_tokens > 0 {
            let first = ini.linear("first", d, d, true)?;
            let rows = cfg.frame_tokens * cfg.frames;
            let bound = 1.0 / (cfg.max_tokens as f64).sqrt();
            let expand = ini.uniform("expand.weight", &[rows, cfg.max_tokens], bound)?;
            let tail = (0..4)
                .map(|i| ini.linear(&format!("tail{i}"), d, d, true))
                .collect::<Result<Vec<_>>>()?;
            Some(Layers { first, expand, tail })
        } else {
            None
        };
        let gates = (0..gate_count)
            .map(|i| ini.constant(&format!("gate{i}"), &[1], 0.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            head,
            gates,
            frames: cfg.frames,
            per_frame: cfg.frame_tokens,
        })
    }

    pub fn gates(&self) -> &[Param] {
        &self.gates
    }

    /// `(B, M, D) -> (B, F, K, D)`, or `None` when `K = 0`.
    pub fn forward(&self, text: &Tensor) -> Result<Option<Tensor>> {
        let Some(layers) = &self.head else {
            return Ok(None);
        };
        let (b, _, d) = text.dims3()?;
        // Linear+SiLU, then a second SiLU.
        let x = layers.first.forward(text)?.silu()?.silu()?;
        let w = layers.expand.t();
        let rows = w.dim(0)?;
        let mut x = w.broadcast_left(b)?.matmul(&x)?.silu()?;
        for lin in &layers.tail {
            x = lin.forward(&x)?.silu()?;
        }
        debug_assert_eq!(rows, self.frames * self.per_frame);
        Ok(Some(x.reshape((b, self.frames, self.per_frame, d))?))
    }
}
