//! Residual, spatial-transformer and temporal-attention blocks.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::{
    merge_heads, norm_groups, sinusoidal_table, softmax_last, split_heads, Conv2d, Init, Linear,
    Norm, Param,
};

/// Residual conv block conditioned on the timestep embedding.
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv2d,
    emb_proj: Linear,
    norm2: Norm,
    conv2: Conv2d,
    skip: Option<Linear>,
    groups_in: usize,
    groups_out: usize,
}

impl ResBlock {
    pub fn new(ini: &mut Init, name: &str, c_in: usize, c_out: usize, emb_dim: usize) -> Result<Self> {
        ini.scoped(name, |ini| {
            Ok(Self {
                norm1: ini.norm("norm1", c_in)?,
                conv1: ini.conv2d("conv1", c_in, c_out, 3)?,
                emb_proj: ini.linear("emb_proj", emb_dim, c_out, true)?,
                norm2: ini.norm("norm2", c_out)?,
                conv2: ini.conv2d("conv2", c_out, c_out, 3)?,
                skip: if c_in != c_out {
                    Some(ini.linear("skip", c_in, c_out, true)?)
                } else {
                    None
                },
                groups_in: norm_groups(c_in),
                groups_out: norm_groups(c_out),
            })
        })
    }

    /// `x`: `(N, H, W, C_in)`, `emb`: `(N, E)`.
    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let h = self.conv1.forward(&self.norm1.group_norm(x, self.groups_in)?.silu()?)?;
        let e = self.emb_proj.forward(&emb.silu()?)?;
        let c = e.dim(1)?;
        let h = h.broadcast_add(&e.reshape((n, 1, 1, c))?)?;
        let h = self.conv2.forward(&self.norm2.group_norm(&h, self.groups_out)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Conditioning stream for cross-attention. The first `text_len` tokens are
/// text; any further tokens are frame-wise tokens whose unnormalized
/// attention weights are scaled by a per-layer gate.
pub(crate) struct CrossContext<'a> {
    pub tokens: &'a Tensor,
    pub text_len: usize,
    pub gates: Option<&'a [Param]>,
}

/// Probabilities captured from one transformer, laid out `(N, heads, q, k)`.
pub(crate) struct AttnCapture {
    pub self_attn: Tensor,
    pub cross_attn: Tensor,
}

/// Self-attention, gated cross-attention and a feed-forward layer on
/// channels-last features.
pub(crate) struct SpatialTransformer {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: Norm,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    cout: Linear,
    norm3: Norm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
    gate_index: usize,
}

impl SpatialTransformer {
    pub fn new(
        ini: &mut Init,
        name: &str,
        channels: usize,
        token_dim: usize,
        heads: usize,
        gate_index: usize,
    ) -> Result<Self> {
        ini.scoped(name, |ini| {
            Ok(Self {
                norm1: ini.norm("norm1", channels)?,
                q: ini.linear("q", channels, channels, false)?,
                k: ini.linear("k", channels, channels, false)?,
                v: ini.linear("v", channels, channels, false)?,
                out: ini.linear("out", channels, channels, true)?,
                norm2: ini.norm("norm2", channels)?,
                cq: ini.linear("cq", channels, channels, false)?,
                ck: ini.linear("ck", token_dim, channels, false)?,
                cv: ini.linear("cv", token_dim, channels, false)?,
                cout: ini.linear("cout", channels, channels, true)?,
                norm3: ini.norm("norm3", channels)?,
                ff1: ini.linear("ff1", channels, 2 * channels, true)?,
                ff2: ini.linear("ff2", 2 * channels, channels, true)?,
                heads,
                gate_index,
            })
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        ctx: &CrossContext,
        capture: bool,
    ) -> Result<(Tensor, Option<AttnCapture>)> {
        let (n, h, w, c) = x.dims4()?;
        let tokens = x.reshape((n, h * w, c))?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();

        let a = self.norm1.layer_norm(&tokens)?;
        let q = split_heads(&self.q.forward(&a)?, self.heads)?;
        let k = split_heads(&self.k.forward(&a)?, self.heads)?;
        let v = split_heads(&self.v.forward(&a)?, self.heads)?;
        let probs = softmax_last(&(q.matmul(&k.t()?)? * scale)?)?;
        let attn = merge_heads(&probs.matmul(&v)?)?;
        let tokens = (tokens + self.out.forward(&attn)?)?;

        let b = self.norm2.layer_norm(&tokens)?;
        let q = split_heads(&self.cq.forward(&b)?, self.heads)?;
        let (cross, cross_probs) = self.cross_attention(&q, ctx, scale, capture)?;
        let tokens = (tokens + self.cout.forward(&merge_heads(&cross)?)?)?;

        let f = self.norm3.layer_norm(&tokens)?;
        let tokens = (&tokens + self.ff2.forward(&self.ff1.forward(&f)?.silu()?)?)?;

        let captured = match (capture, cross_probs) {
            (true, Some(cross_attn)) => Some(AttnCapture {
                self_attn: probs,
                cross_attn,
            }),
            _ => None,
        };
        Ok((tokens.reshape((n, h, w, c))?, captured))
    }

    /// Softmax over `[text ; gate * frame-wise]` keys, written so that a zero
    /// gate reproduces the text-only result bit for bit.
    fn cross_attention(
        &self,
        q: &Tensor,
        ctx: &CrossContext,
        scale: f64,
        capture: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let total = ctx.tokens.dim(1)?;
        let text = ctx.tokens.narrow(1, 0, ctx.text_len)?;
        let kt = split_heads(&self.ck.forward(&text)?, self.heads)?;
        let vt = split_heads(&self.cv.forward(&text)?, self.heads)?;
        let lt = (q.matmul(&kt.t()?)? * scale)?;
        let m = lt.max_keepdim(D::Minus1)?.detach();
        let et = lt.broadcast_sub(&m)?.exp()?;
        let mut num = et.matmul(&vt)?;
        let mut z = et.sum_keepdim(D::Minus1)?;
        let mut ef = None;
        if total > ctx.text_len {
            let gates = ctx.gates.expect("frame-wise tokens require gates");
            let gate = gates[self.gate_index].t();
            let fw = ctx.tokens.narrow(1, ctx.text_len, total - ctx.text_len)?;
            let kf = split_heads(&self.ck.forward(&fw)?, self.heads)?;
            let vf = split_heads(&self.cv.forward(&fw)?, self.heads)?;
            let lf = (q.matmul(&kf.t()?)? * scale)?;
            // Clamp keeps exp finite so a zero gate yields exact zeros.
            let e = lf.broadcast_sub(&m)?.clamp(-1e4, 60.0)?.exp()?.broadcast_mul(&gate)?;
            num = (num + e.matmul(&vf)?)?;
            z = (z + e.sum_keepdim(D::Minus1)?)?;
            ef = Some(e);
        }
        let out = num.broadcast_div(&z)?;
        let probs = if capture {
            let unnorm = match ef {
                Some(e) => Tensor::cat(&[&et, &e], D::Minus1)?,
                None => et,
            };
            Some(unnorm.broadcast_div(&z)?)
        } else {
            None
        };
        Ok((out, probs))
    }
}

/// Attention over the frame axis with a zero-initialized output projection,
/// so the layer is an exact identity at initialization.
pub(crate) struct TemporalAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj_out: Linear,
    heads: usize,
}

impl TemporalAttention {
    pub fn new(ini: &mut Init, name: &str, channels: usize, inner: usize, heads: usize) -> Result<Self> {
        ini.scoped(name, |ini| {
            Ok(Self {
                norm: ini.norm("norm", channels)?,
                q: ini.linear("q", channels, inner, false)?,
                k: ini.linear("k", channels, inner, false)?,
                v: ini.linear("v", channels, inner, false)?,
                proj_out: ini.zero_linear("proj_out", inner, channels)?,
                heads,
            })
        })
    }

    /// The residual branch on a `(S, F, C)` sequence of per-location frame
    /// tracks; the caller adds it to its input.
    pub fn branch(&self, seq: &Tensor) -> Result<Tensor> {
        let (_, frames, c) = seq.dims3()?;
        let positions: Vec<f64> = (0..frames).map(|f| f as f64).collect();
        let pos = sinusoidal_table(&positions, c, seq.dtype())?;
        let a = self.norm.layer_norm(seq)?.broadcast_add(&pos)?;
        let q = split_heads(&self.q.forward(&a)?, self.heads)?;
        let k = split_heads(&self.k.forward(&a)?, self.heads)?;
        let v = split_heads(&self.v.forward(&a)?, self.heads)?;
        let inner = q.dim(D::Minus1)?;
        let probs = softmax_last(&(q.matmul(&k.t()?)? * (1.0 / (inner as f64).sqrt()))?)?;
        let attn = merge_heads(&probs.matmul(&v)?)?;
        self.proj_out.forward(&attn)
    }

    /// `x`: `(B*F, H, W, C)` with `frames` consecutive entries per video.
    pub fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        let b = n / frames;
        let seq = x
            .reshape((b, frames, h * w, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * h * w, frames, c))?;
        let delta = self.branch(&seq)?;
        let delta = delta
            .reshape((b, h * w, frames, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, h, w, c))?;
        Ok((x + delta)?)
    }
}

/// `(N, H, W, C) -> (N, H/2, W/2, C)` by 2x2 averaging.
pub(crate) fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((n, h / 2, 2, w / 2, 2, c))?
        .mean_keepdim(4)?
        .mean_keepdim(2)?
        .reshape((n, h / 2, w / 2, c))?)
}

/// `(N, H, W, C) -> (N, 2H, 2W, C)` by nearest-neighbour repetition.
pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((n, h, 1, w, 1, c))?
        .broadcast_as((n, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((n, 2 * h, 2 * w, c))?)
}
