//! Cross-attention maps of the last decoder layer, split into caption-word
//! tokens and frame-wise tokens, rendered as per-frame heatmap grids.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{heatmap_grid, write_json, write_png};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{Mode, T2VModel};
use crate::noise_prior::gaussian_tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const FRAME_TOKENS_PNG: &str = "frame_tokens.png";
pub const TEXT_TOKENS_PNG: &str = "text_tokens.png";
pub const SUMMARY_JSON: &str = "summary.json";

/// Head-averaged maps: `maps[token][frame]` is a row-major `map_h × map_w`
/// attention map over query positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub map_h: usize,
    pub map_w: usize,
    pub text: Vec<Vec<Vec<f64>>>,
    pub frame_tokens: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub schema_version: u32,
    pub caption: String,
    pub t_probe: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub text_tokens: usize,
    pub frame_tokens: usize,
    /// Mean over tokens and positions of the across-frame variance.
    pub frame_token_variance: f64,
    pub text_token_variance: f64,
}

/// Mean over tokens and positions of the variance across frames.
pub fn across_frame_variance(maps: &[Vec<Vec<f64>>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for token in maps {
        let f = token.len() as f64;
        let Some(first) = token.first() else { continue };
        for p in 0..first.len() {
            let mean = token.iter().map(|m| m[p]).sum::<f64>() / f;
            sum += token.iter().map(|m| (m[p] - mean).powi(2)).sum::<f64>() / f;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs a full-mode forward on `video` `(F, C, H, W)` noised to `t_probe`
/// (one noise frame from `seed`, shared by all frames) and collects the
/// last decoder layer's cross-attention.
pub fn attention_maps(
    model: &T2VModel,
    video: &Tensor,
    caption: &str,
    t_probe: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<AttentionMaps> {
    let cfg = model.config();
    let (f, c, h, w) = video.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_tensor(&mut rng, &[1, 1, c, h, w], model.dtype())?
        .broadcast_as((1, f, c, h, w))?
        .contiguous()?;
    let x_t = schedule.q_sample(&video.unsqueeze(0)?.to_dtype(model.dtype())?, t_probe, &noise)?;
    let tokens = model.generate_frame_tokens(&model.tokenize_caption(caption)?, Mode::Full)?;
    let (_, record) = model.forward(&x_t, &[t_probe], &tokens, Mode::Full, true)?;
    let record = record.ok_or_else(|| Error::State("forward did not capture attention".into()))?;
    let last = record
        .cross_attn
        .last()
        .ok_or_else(|| Error::State("no decoder cross-attention captured".into()))?;
    // (1, F, heads, q, tokens) -> (F, tokens, q)
    let maps = last.get(0)?.mean(1)?.transpose(1, 2)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let q = maps[0][0].len();
    let (map_h, map_w) = (0..cfg.levels())
        .map(|l| (cfg.height >> l, cfg.width >> l))
        .find(|(a, b)| a * b == q)
        .ok_or_else(|| Error::shape(format!("{q} query positions match no U-Net level")))?;
    let words = caption.split_whitespace().count().min(cfg.max_tokens);
    let per_token = |k: usize| -> Vec<Vec<f64>> { maps.iter().map(|frame| frame[k].clone()).collect() };
    Ok(AttentionMaps {
        map_h,
        map_w,
        text: (0..words).map(per_token).collect(),
        frame_tokens: (cfg.max_tokens..cfg.max_tokens + cfg.frame_tokens).map(per_token).collect(),
    })
}

/// Writes `frame_tokens.png` and `text_tokens.png` (one row per token, one
/// column per frame) and `summary.json` into `dir`.
pub fn write_attention_report(dir: &Path, maps: &AttentionMaps, caption: &str, t_probe: usize) -> Result<AttentionSummary> {
    let scale = (64 / maps.map_h.max(maps.map_w)).max(1);
    if !maps.frame_tokens.is_empty() {
        write_png(
            &dir.join(FRAME_TOKENS_PNG),
            &heatmap_grid(&maps.frame_tokens, maps.map_h, maps.map_w, scale)?,
        )?;
    }
    if !maps.text.is_empty() {
        write_png(&dir.join(TEXT_TOKENS_PNG), &heatmap_grid(&maps.text, maps.map_h, maps.map_w, scale)?)?;
    }
    let summary = AttentionSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        caption: caption.to_string(),
        t_probe,
        map_h: maps.map_h,
        map_w: maps.map_w,
        text_tokens: maps.text.len(),
        frame_tokens: maps.frame_tokens.len(),
        frame_token_variance: across_frame_variance(&maps.frame_tokens),
        text_token_variance: across_frame_variance(&maps.text),
    };
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}
