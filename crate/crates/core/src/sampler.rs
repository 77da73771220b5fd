//! DDIM sampling with piecewise classifier-free guidance and
//! mitigating-gradient (MG) guidance, which pulls the predicted clean frames
//! of a video towards each other at every denoising step.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{same_shape, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Mode, T2VModel, TokenBundle};
use crate::noise_prior::gaussian_tensor;
use crate::video::{ValueRange, VideoBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Guidance scale used while `t >= cfg_switch_fraction * T`.
    pub cfg_high: f64,
    pub cfg_low: f64,
    pub cfg_switch_fraction: f64,
    pub mg_alpha: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            cfg_high: 12.5,
            cfg_low: 7.5,
            cfg_switch_fraction: 0.7,
            mg_alpha: 40.0,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.cfg_high, self.cfg_low, self.cfg_switch_fraction, self.mg_alpha, self.eta];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("sampler settings must be finite".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        if self.cfg_high < 0.0 || self.cfg_low < 0.0 {
            return Err(Error::Config("guidance scales must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.cfg_switch_fraction) {
            return Err(Error::Config("cfg_switch_fraction must lie in [0, 1]".into()));
        }
        if self.mg_alpha < 0.0 {
            return Err(Error::Config("mg_alpha must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config("eta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `cfg_high` while `t >= cfg_switch_fraction * T` (close to pure noise),
/// `cfg_low` afterwards.
pub fn cfg_scale_at(config: &SamplerConfig, t: usize, train_steps: usize) -> f64 {
    if t as f64 >= config.cfg_switch_fraction * train_steps as f64 {
        config.cfg_high
    } else {
        config.cfg_low
    }
}

/// `uncond + scale · (cond - uncond)`. Scales 0 and 1 return the respective
/// prediction unchanged.
pub fn combine_cfg(uncond: &Tensor, cond: &Tensor, scale: f64) -> Result<Tensor> {
    same_shape(uncond, cond)?;
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    Ok((uncond + ((cond - uncond)? * scale)?)?)
}

/// Classifier-free guided noise prediction from two full-mode forwards.
pub fn cfg_eps(
    model: &T2VModel,
    x_t: &Tensor,
    t: usize,
    cond: &TokenBundle,
    uncond: &TokenBundle,
    scale: f64,
) -> Result<Tensor> {
    let (c, _) = model.forward(x_t, &[t], cond, Mode::Full, false)?;
    let (u, _) = model.forward(x_t, &[t], uncond, Mode::Full, false)?;
    combine_cfg(&u, &c, scale)
}

/// MG gradient for predicted clean frames `x_hat` `(B, F, C, H, W)`.
///
/// With `D_j = x̂^(j) - x̂^(j-1)`, `n_j = ‖D_j‖` over `(C, H, W)` and
/// `S = median(n)² / ln(F-1)` per video, frame `j >= 2` receives
/// `G_j = 2 · exp(-n_j²/S) · D_j / S · ω`. The first frame always gets zero,
/// as does every frame of a video whose `S` is zero.
pub fn mg_gradient(x_hat: &Tensor, omega: f64) -> Result<Tensor> {
    let (b, f, c, h, w) = x_hat.dims5()?;
    if f < 3 {
        return Err(Error::param(format!(
            "mitigating-gradient guidance needs at least 3 frames, got {f}"
        )));
    }
    let per_frame = c * h * w;
    let x = x_hat.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut g = vec![0.0; x.len()];
    let log_f = ((f - 1) as f64).ln();
    for v in 0..b {
        let frame = |j: usize| &x[(v * f + j) * per_frame..(v * f + j + 1) * per_frame];
        let diffs: Vec<Vec<f64>> = (1..f)
            .map(|j| frame(j).iter().zip(frame(j - 1)).map(|(a, p)| a - p).collect())
            .collect();
        let norms: Vec<f64> = diffs.iter().map(|d| d.iter().map(|e| e * e).sum::<f64>().sqrt()).collect();
        let med = median(&norms);
        let s = med * med / log_f;
        if s == 0.0 {
            continue;
        }
        for (k, (d, n)) in diffs.iter().zip(&norms).enumerate() {
            let coef = 2.0 * (-(n * n) / s).exp() / s * omega;
            let start = (v * f + k + 1) * per_frame;
            for (slot, e) in g[start..start + per_frame].iter_mut().zip(d) {
                *slot = coef * e;
            }
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("mitigating gradient is not finite".into()));
    }
    Ok(Tensor::from_vec(g, (b, f, c, h, w), &Device::Cpu)?.to_dtype(x_hat.dtype())?)
}

/// Midpoint median.
fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Guided prediction and the mean magnitude of the applied gradient.
#[derive(Debug, Clone)]
pub struct Guided {
    pub eps: Tensor,
    pub mean_abs_g: f64,
}

/// `eps_pred + α · G(x̂)` where `x̂` is the clean estimate implied by
/// `(x_t, eps_pred)` at `t`. Returns `eps_pred` untouched when `α = 0` or
/// the gradient vanishes.
pub fn mg_guidance(eps_pred: &Tensor, x_t: &Tensor, t: usize, schedule: &NoiseSchedule, alpha: f64) -> Result<Tensor> {
    Ok(mg_guidance_traced(eps_pred, x_t, t, schedule, alpha)?.eps)
}

pub fn mg_guidance_traced(
    eps_pred: &Tensor,
    x_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    alpha: f64,
) -> Result<Guided> {
    same_shape(eps_pred, x_t)?;
    let (_, f, _, _, _) = eps_pred.dims5()?;
    if f < 3 {
        return Err(Error::param(format!(
            "mitigating-gradient guidance needs at least 3 frames, got {f}"
        )));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::param(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let omega = schedule.mg_omega(t)?;
    if alpha == 0.0 {
        return Ok(Guided {
            eps: eps_pred.clone(),
            mean_abs_g: 0.0,
        });
    }
    let x_hat = schedule.predict_x0(x_t, eps_pred, t)?;
    let g = mg_gradient(&x_hat, omega)?;
    let mean_abs_g = g.abs()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if mean_abs_g == 0.0 {
        return Ok(Guided {
            eps: eps_pred.clone(),
            mean_abs_g,
        });
    }
    Ok(Guided {
        eps: (eps_pred + (g * alpha)?)?,
        mean_abs_g,
    })
}

/// One DDIM update from `t` to `t_prev`; `None` stands for the clean end of
/// the chain (`ᾱ = 1`) and returns the clean estimate itself. With `eta > 0`
/// a noise tensor of the same shape must be supplied.
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::param(format!("DDIM step must go backwards, got {t} -> {p}")));
        }
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param(format!("eta must lie in [0, 1], got {eta}")));
    }
    let x0 = schedule.predict_x0(x_t, eps_pred, t)?;
    let Some(p) = t_prev else {
        return Ok(x0);
    };
    let ab_t = schedule.alpha_bar(t)?;
    let ab_p = schedule.alpha_bar(p)?;
    if eta == 0.0 {
        return Ok(((x0 * ab_p.sqrt())? + (eps_pred * (1.0 - ab_p).sqrt())?)?);
    }
    let noise = noise.ok_or_else(|| Error::param("stochastic DDIM (eta > 0) needs a noise tensor"))?;
    same_shape(x_t, noise)?;
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt();
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    Ok(((x0 * ab_p.sqrt())? + (eps_pred * dir)? + (noise * sigma)?)?)
}

/// Uniformly strided timesteps over `[0, T)`, largest first.
pub fn timestep_sequence(steps: usize, train_steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > train_steps {
        return Err(Error::param(format!(
            "cannot take {steps} sampling steps over {train_steps} timesteps"
        )));
    }
    let stride = train_steps / steps;
    Ok((0..steps).rev().map(|i| i * stride).collect())
}

/// One denoising step of a sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub timestep: usize,
    pub cfg_scale: f64,
    pub mean_abs_g: f64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// `(1, F, C, H, W)` in `[-1, 1]`.
    pub video: VideoBatch,
    pub trace: Vec<TraceStep>,
}

/// Full-mode conditional and unconditional token bundles for one caption.
pub fn prompt_tokens(model: &T2VModel, caption: &str) -> Result<(TokenBundle, TokenBundle)> {
    let cond = model.generate_frame_tokens(&model.tokenize_caption(caption)?, Mode::Full)?;
    let uncond = model.generate_frame_tokens(&model.tokenize_caption("")?, Mode::Full)?;
    Ok((cond, uncond))
}

/// Initial state `x_T` for a seed, `(1, F, C, H, W)` standard normal.
pub fn initial_noise(model: &T2VModel, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let c = model.config();
    gaussian_tensor(rng, &[1, c.frames, c.channels, c.height, c.width], model.dtype())
}

/// Generates one video for `caption`: CFG, then MG guidance, then a DDIM
/// update at each step. Deterministic given the model, caption and config.
pub fn sample_video(
    model: &T2VModel,
    caption: &str,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<SampleOutput> {
    config.validate()?;
    if config.mg_alpha > 0.0 && model.config().frames < 3 {
        return Err(Error::param("mitigating-gradient guidance needs at least 3 frames"));
    }
    let (cond, uncond) = prompt_tokens(model, caption)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = initial_noise(model, &mut rng)?;
    let ts = timestep_sequence(config.steps, schedule.len())?;
    let mut trace = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let scale = cfg_scale_at(config, t, schedule.len());
        let eps = cfg_eps(model, &x, t, &cond, &uncond, scale)?;
        let guided = if config.mg_alpha > 0.0 {
            mg_guidance_traced(&eps, &x, t, schedule, config.mg_alpha)?
        } else {
            Guided {
                eps,
                mean_abs_g: 0.0,
            }
        };
        let t_prev = ts.get(i + 1).copied();
        let noise = if config.eta > 0.0 && t_prev.is_some() {
            Some(gaussian_tensor(&mut rng, x.dims(), x.dtype())?)
        } else {
            None
        };
        x = ddim_step(&x, &guided.eps, t, t_prev, schedule, config.eta, noise.as_ref())?;
        log::debug!("sample step {i} t={t} cfg={scale} |G|={:.3e}", guided.mean_abs_g);
        trace.push(TraceStep {
            step: i,
            timestep: t,
            cfg_scale: scale,
            mean_abs_g: guided.mean_abs_g,
        });
    }
    let video = VideoBatch::new(x.clamp(-1f64, 1f64)?, ValueRange::Clean)?;
    Ok(SampleOutput { video, trace })
}
