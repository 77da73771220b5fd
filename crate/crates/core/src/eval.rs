//! Desk-scale video metrics: pixel-space smoothness between consecutive
//! frames and cross-frame consistency of bottleneck features, evaluated over
//! the synthetic caption grid.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::data::vocab::caption_grid;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{Mode, T2VModel};
use crate::noise_prior::gaussian_tensor;
use crate::sampler::{sample_video, SamplerConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `‖frame_j − frame_{j−1}‖₂ / (C·H·W)` for `j = 1..F` of an `(F, C, H, W)`
/// clip.
pub fn smoothness_per_pair(video: &Tensor) -> Result<Vec<f64>> {
    let (f, c, h, w) = video.dims4()?;
    if f < 2 {
        return Err(Error::param(format!("smoothness needs at least 2 frames, got {f}")));
    }
    let v = video.to_dtype(DType::F64)?;
    let diff = (v.narrow(0, 1, f - 1)? - v.narrow(0, 0, f - 1)?)?;
    let norms = diff.sqr()?.flatten_from(1)?.sum(1)?.sqrt()?.to_vec1::<f64>()?;
    let n = (c * h * w) as f64;
    Ok(norms.into_iter().map(|d| d / n).collect())
}

/// Mean of [`smoothness_per_pair`]; 0 exactly when all frames are identical.
pub fn smoothness_metric(video: &Tensor) -> Result<f64> {
    let pairs = smoothness_per_pair(video)?;
    Ok(pairs.iter().sum::<f64>() / pairs.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine over all unordered pairs of rows.
pub fn mean_pairwise_cosine(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::param("pairwise cosine needs at least 2 vectors"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            sum += cosine(&rows[i], &rows[j]);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Mean cosine between every row of `a` and every row of `b`.
pub fn mean_cross_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += cosine(x, y);
        }
    }
    sum / (a.len() * b.len()).max(1) as f64
}

/// Flattened bottleneck features of each frame of an `(F, C, H, W)` clip,
/// noised to `t_probe`. One noise frame drawn from `seed` is shared by all
/// frames, so the features differ only where the frames do.
pub fn h_features(
    model: &T2VModel,
    clip: &Tensor,
    caption: &str,
    t_probe: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let (f, c, h, w) = clip.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_tensor(&mut rng, &[1, 1, c, h, w], model.dtype())?.broadcast_as((1, f, c, h, w))?;
    let x0 = clip.unsqueeze(0)?.to_dtype(model.dtype())?;
    let x_t = schedule.q_sample(&x0, t_probe, &noise.contiguous()?)?;
    let tokens = model.generate_frame_tokens(&model.tokenize_caption(caption)?, Mode::Full)?;
    let (_, record) = model.forward(&x_t, &[t_probe], &tokens, Mode::Full, true)?;
    let record = record.ok_or_else(|| Error::State("forward did not capture features".into()))?;
    let hf = record.h.get(0)?.flatten_from(1)?.to_dtype(DType::F64)?;
    Ok(hf.to_vec2::<f64>()?)
}

/// Mean pairwise cosine similarity of per-frame bottleneck features, in
/// `[-1, 1]`; 1 for a clip of identical frames.
pub fn h_consistency_metric(
    model: &T2VModel,
    clip: &Tensor,
    caption: &str,
    t_probe: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    mean_pairwise_cosine(&h_features(model, clip, caption, t_probe, schedule, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub caption: String,
    pub seed: u64,
    pub smoothness: f64,
    pub h_consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub t_probe: usize,
    pub smoothness: f64,
    pub h_consistency: f64,
    pub per_video: Vec<VideoEval>,
}

/// Samples one video per caption (seed `sampler.seed + index`) and scores it.
pub fn evaluate(
    model: &T2VModel,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    captions: &[String],
    t_probe: usize,
) -> Result<EvalReport> {
    if captions.is_empty() {
        return Err(Error::param("evaluation needs at least one caption"));
    }
    if t_probe >= schedule.len() {
        return Err(Error::param(format!("t_probe {t_probe} outside 0..{}", schedule.len())));
    }
    let mut per_video = Vec::with_capacity(captions.len());
    for (i, caption) in captions.iter().enumerate() {
        let cfg = SamplerConfig {
            seed: sampler.seed.wrapping_add(i as u64),
            ..sampler.clone()
        };
        let out = sample_video(model, caption, &cfg, schedule)?;
        let clip = out.video.tensor().get(0)?;
        let entry = VideoEval {
            caption: caption.clone(),
            seed: cfg.seed,
            smoothness: smoothness_metric(&clip)?,
            h_consistency: h_consistency_metric(model, &clip, caption, t_probe, schedule, cfg.seed)?,
        };
        log::info!(
            "eval {}/{} {caption:?}: smoothness {:.4e} h_consistency {:.4}",
            i + 1,
            captions.len(),
            entry.smoothness,
            entry.h_consistency
        );
        per_video.push(entry);
    }
    let n = per_video.len() as f64;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        t_probe,
        smoothness: per_video.iter().map(|v| v.smoothness).sum::<f64>() / n,
        h_consistency: per_video.iter().map(|v| v.h_consistency).sum::<f64>() / n,
        per_video,
    })
}
