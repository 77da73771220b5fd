//! Two-phase training.
//!
//! Phase one fits the spatial U-Net on independent frames with the denoising
//! loss, then freezes it. Phase two trains only the inflation parts
//! (temporal layers, mapping network, frame-token generator, projection head)
//! with the full objective.

use candle_core::{Device, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::losses::{
    combine, dc_loss_other_videos, reg_loss, scalar, simple_loss, total_loss, trs_loss, LossBreakdown, LossParts, LossWeights,
    NegativeQueue, DEFAULT_TAU,
};
use crate::model::{Mode, T2VModel};
use crate::noise_prior::gaussian_tensor;
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainSpatial,
    TrainTemporal,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PretrainSpatial => "pretrain_spatial",
            Self::TrainTemporal => "train_temporal",
        })
    }
}

/// Linearly decaying learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { start: lr, end: lr }
    }

    /// Rate at `step` of a `total`-step run; `start` at 0, `end` at the last step.
    pub fn at(&self, step: u64, total: u64) -> f64 {
        if total <= 1 {
            return self.start;
        }
        let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Inflation-phase schedule.
    pub learning_rate: LrSchedule,
    /// Spatial pretraining schedule.
    pub pretrain_learning_rate: LrSchedule,
    pub weights: LossWeights,
    pub pretrain_steps: u64,
    pub steps: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub seed: u64,
    pub tau: f64,
    /// Probability of training on the empty caption.
    pub uncond_prob: f64,
    /// Draw the second frame of each contrastive pair at its own timestep.
    pub cross_t_pairs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            learning_rate: LrSchedule { start: 1e-4, end: 1e-5 },
            pretrain_learning_rate: LrSchedule { start: 1e-3, end: 1e-4 },
            weights: LossWeights::default(),
            pretrain_steps: 500,
            steps: 200,
            checkpoint_interval: 100,
            log_interval: 10,
            seed: 0,
            tau: DEFAULT_TAU,
            uncond_prob: 0.1,
            cross_t_pairs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for lr in [self.learning_rate, self.pretrain_learning_rate] {
            if !(lr.start >= 0.0 && lr.end >= 0.0 && lr.start.is_finite() && lr.end.is_finite()) {
                return Err(Error::Config("learning rates must be finite and >= 0".into()));
            }
        }
        let w = self.weights;
        if [w.trs, w.reg, w.dc].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::Config("uncond_prob must lie in [0, 1]".into()));
        }
        if self.checkpoint_interval < 1 || self.log_interval < 1 {
            return Err(Error::Config("intervals must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a training run mutates.
pub struct TrainState {
    pub model: T2VModel,
    pub queue: NegativeQueue,
    pub optimizer: Adam,
    pub phase: Phase,
    /// Completed steps in the current phase.
    pub step: u64,
}

impl TrainState {
    /// Fresh state at the start of spatial pretraining.
    pub fn new(model: T2VModel) -> Result<Self> {
        let queue = NegativeQueue::new(model.config().queue_capacity)?;
        Ok(Self {
            model,
            queue,
            optimizer: Adam::default(),
            phase: Phase::PretrainSpatial,
            step: 0,
        })
    }

    /// Freezes the spatial model and starts the inflation phase with a fresh
    /// optimizer and queue.
    pub fn begin_inflation(&mut self) -> Result<()> {
        self.model.freeze_spatial();
        self.phase = Phase::TrainTemporal;
        self.step = 0;
        self.optimizer = Adam::default();
        self.queue = NegativeQueue::new(self.model.config().queue_capacity)?;
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub lr: f64,
    pub simple: f64,
    pub reg: f64,
    pub trs: f64,
    pub dc: f64,
    pub total: f64,
    pub dc_active: bool,
    pub timestep: usize,
}

/// Random stream of one step, fixed by `(seed, phase, step)`.
pub fn step_rng(seed: u64, phase: Phase, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = match phase {
        Phase::PretrainSpatial => 0,
        Phase::TrainTemporal => 1u64 << 63,
    };
    rng.set_stream(lane | step);
    rng
}

struct Batch {
    ids: Vec<usize>,
    clips: Tensor,
    captions: Vec<String>,
}

fn draw_batch(dataset: &Dataset, config: &TrainConfig, rng: &mut ChaCha8Rng, dtype: candle_core::DType) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::State("dataset is empty".into()));
    }
    let mut ids = Vec::with_capacity(config.batch_size);
    let mut clips = Vec::with_capacity(config.batch_size);
    let mut captions = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let i = rng.random_range(0..dataset.len());
        let (clip, caption) = dataset.get(i)?;
        let drop = rng.random::<f64>() < config.uncond_prob;
        ids.push(i);
        clips.push(clip);
        captions.push(if drop { String::new() } else { caption });
    }
    Ok(Batch {
        ids,
        clips: Tensor::stack(&clips, 0)?.to_dtype(dtype)?,
        captions,
    })
}

fn check_finite(name: &str, v: f64, step: u64, t: usize) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "{name} loss is {v} at step {step} (timestep {t}); aborting"
        )));
    }
    Ok(())
}

/// One spatial pretraining step on the frames of a batch, each frame with
/// its own timestep. Returns the denoising loss.
pub fn pretrain_step(
    state: &mut TrainState,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<StepRecord> {
    if state.phase != Phase::PretrainSpatial {
        return Err(Error::State("pretraining step requested outside the pretraining phase".into()));
    }
    if state.model.is_spatial_frozen() {
        return Err(Error::State("spatial parameters are frozen".into()));
    }
    let model = &state.model;
    let cfg = model.config();
    let mut rng = step_rng(config.seed, Phase::PretrainSpatial, state.step);
    let batch = draw_batch(dataset, config, &mut rng, model.dtype())?;
    let (b, f) = (config.batch_size, cfg.frames);
    let n = b * f;
    let frames = batch.clips.reshape((n, cfg.channels, cfg.height, cfg.width))?;
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(0..schedule.len())).collect();
    let eps = gaussian_tensor(&mut rng, frames.dims(), model.dtype())?;
    let ab: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bars()[t]).collect();
    let shape = (n, 1, 1, 1);
    let sa = Tensor::from_vec(ab.iter().map(|a| a.sqrt()).collect::<Vec<_>>(), shape, &Device::Cpu)?.to_dtype(model.dtype())?;
    let sb = Tensor::from_vec(ab.iter().map(|a| (1.0 - a).sqrt()).collect::<Vec<_>>(), shape, &Device::Cpu)?.to_dtype(model.dtype())?;
    let x_t = (frames.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?;
    let text = model.embed_captions(&batch.captions)?;
    let (_, m, d) = text.dims3()?;
    let text = text.unsqueeze(1)?.broadcast_as((b, f, m, d))?.reshape((n, m, d))?;
    let pred = model.spatial_forward(&x_t, &ts, &text)?;
    let loss = simple_loss(&pred, &eps)?;
    let value = scalar(&loss)?;
    check_finite("denoising", value, state.step, ts[0])?;
    let grads = loss.backward()?;
    let lr = config.pretrain_learning_rate.at(state.step, config.pretrain_steps);
    let params = model.spatial_params();
    state.optimizer.step(&params, &grads, lr)?;
    let record = StepRecord {
        phase: Phase::PretrainSpatial,
        step: state.step,
        lr,
        simple: value,
        reg: 0.0,
        trs: 0.0,
        dc: 0.0,
        total: value,
        dc_active: false,
        timestep: ts[0],
    };
    state.step += 1;
    Ok(record)
}

/// One inflation step: full and image-only forwards on a noised batch, all
/// four losses, an update of the trainable groups, then the step's
/// contrastive positives enter the queue.
pub fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(LossBreakdown, StepRecord)> {
    if state.phase != Phase::TrainTemporal {
        return Err(Error::State("inflation step requested outside the inflation phase".into()));
    }
    if !state.model.is_spatial_frozen() {
        return Err(Error::State("spatial parameters must be frozen before inflation training".into()));
    }
    let model = &state.model;
    let cfg = model.config();
    if cfg.frames < 2 {
        return Err(Error::param("inflation training needs at least 2 frames"));
    }
    let mut rng = step_rng(config.seed, Phase::TrainTemporal, state.step);
    let batch = draw_batch(dataset, config, &mut rng, model.dtype())?;
    let b = config.batch_size;
    let t = rng.random_range(0..schedule.len());
    let eps = gaussian_tensor(&mut rng, batch.clips.dims(), model.dtype())?;
    let x_t = schedule.q_sample(&batch.clips, t, &eps)?;

    let text = model.embed_captions(&batch.captions)?;
    let full = model.generate_frame_tokens(&text, Mode::Full)?;
    let image = model.generate_frame_tokens(&text, Mode::ImageOnly)?;
    let (eps_full, record) = model.forward(&x_t, &[t], &full, Mode::Full, true)?;
    let record = record.ok_or_else(|| Error::State("forward did not capture attention".into()))?;
    let (eps_image, _) = model.forward(&x_t, &[t], &image, Mode::ImageOnly, false)?;

    let simple = simple_loss(&eps_full, &eps)?;
    let reg = reg_loss(&eps_full, &eps_image, t, schedule.len())?;
    let trs = trs_loss(&record)?;

    // One positive pair per clip: two distinct frames.
    let mut first = Vec::with_capacity(b);
    let mut second = Vec::with_capacity(b);
    for _ in 0..b {
        let j1 = rng.random_range(0..cfg.frames);
        let mut j2 = rng.random_range(0..cfg.frames - 1);
        if j2 >= j1 {
            j2 += 1;
        }
        first.push(j1);
        second.push(j2);
    }
    let pick = |h: &Tensor, frames: &[usize]| -> Result<Tensor> {
        let rows = frames
            .iter()
            .enumerate()
            .map(|(i, &j)| Ok(h.get(i)?.get(j)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    };
    let h1 = pick(&record.h, &first)?;
    let h2 = if config.cross_t_pairs {
        let t2 = rng.random_range(0..schedule.len());
        let eps2 = gaussian_tensor(&mut rng, batch.clips.dims(), model.dtype())?;
        let x2 = schedule.q_sample(&batch.clips, t2, &eps2)?;
        let (_, rec2) = model.forward(&x2, &[t2], &full, Mode::Full, true)?;
        pick(&rec2.expect("captured").h, &second)?
    } else {
        pick(&record.h, &second)?
    };
    let z1 = model.project_h_batch(&h1)?;
    let z2 = model.project_h_batch(&h2)?;
    let ids: Vec<u64> = batch.ids.iter().map(|&i| i as u64).collect();
    let dc = if state.queue.is_empty() {
        None
    } else {
        dc_loss_other_videos(&z1, &z2, &state.queue, &ids, config.tau)?
    };

    let parts = LossParts {
        simple: scalar(&simple)?,
        reg: scalar(&reg)?,
        trs: scalar(&trs)?,
        dc: dc.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
    };
    for (name, v) in [("simple", parts.simple), ("reg", parts.reg), ("trs", parts.trs), ("dc", parts.dc)] {
        check_finite(name, v, state.step, t)?;
    }
    let breakdown = total_loss(parts, config.weights)?;
    let total = combine(&simple, Some(&reg), Some(&trs), dc.as_ref(), config.weights)?;
    let grads = total.backward()?;
    let lr = config.learning_rate.at(state.step, config.steps);
    let params = model.inflation_params();
    state.optimizer.step(&params, &grads, lr)?;
    model.project_constraints()?;

    let positives = Tensor::cat(&[&z1.detach(), &z2.detach()], 0)?;
    let pushed: Vec<u64> = ids.iter().chain(&ids).copied().collect();
    state.queue.push(&positives, &pushed)?;

    let record = StepRecord {
        phase: Phase::TrainTemporal,
        step: state.step,
        lr,
        simple: breakdown.simple,
        reg: breakdown.reg,
        trs: breakdown.trs,
        dc: breakdown.dc,
        total: breakdown.total,
        dc_active: dc.is_some(),
        timestep: t,
    };
    state.step += 1;
    Ok((breakdown, record))
}

/// Full-mode denoising loss averaged over every clip of `dataset` at
/// `timesteps` evenly spaced timesteps, with noise fixed by `seed`. A
/// low-variance view of training progress.
pub fn probe_loss(model: &T2VModel, dataset: &Dataset, schedule: &NoiseSchedule, timesteps: usize, seed: u64) -> Result<f64> {
    if timesteps < 1 || dataset.is_empty() {
        return Err(Error::param("probe needs at least one clip and one timestep"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..dataset.len() {
        let (clip, caption) = dataset.get(i)?;
        let x0 = clip.unsqueeze(0)?.to_dtype(model.dtype())?;
        let tokens = model.generate_frame_tokens(&model.tokenize_caption(&caption)?, Mode::Full)?;
        for k in 0..timesteps {
            let t = (2 * k + 1) * schedule.len() / (2 * timesteps);
            let eps = gaussian_tensor(&mut rng, x0.dims(), model.dtype())?;
            let x_t = schedule.q_sample(&x0, t, &eps)?;
            let (pred, _) = model.forward(&x_t, &[t], &tokens, Mode::Full, false)?;
            total += scalar(&simple_loss(&pred, &eps)?)?;
        }
    }
    Ok(total / (dataset.len() * timesteps) as f64)
}

/// Windowed mean of the first and last `window` values.
pub fn smoothed_ends(values: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(values.len() / 2);
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..w]), mean(&values[values.len() - w..])))
}
