//! Noise schedule, forward diffusion and the schedule-derived scalars used by
//! the losses and the sampler.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable description of a linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end)
    }
}

/// `β_t`, `α_t = 1 - β_t` and `ᾱ_t = Π α` for `t = 0..T`.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated between `beta_start` and `beta_end`,
    /// both endpoints included.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::param(format!(
                "schedule needs at least 2 timesteps, got {train_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let last = (train_steps - 1) as f64;
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / last)
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::param(format!(
                "timestep {t} out of range for a schedule of {} steps",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `√ᾱ_t · x0 + √(1-ᾱ_t) · eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        same_shape(x0, eps)?;
        let ab = self.alpha_bar(t)?;
        Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    /// One step of the single-step forward kernel,
    /// `√(1-β_t) · x_prev + √β_t · eps`.
    pub fn forward_step(&self, x_prev: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        same_shape(x_prev, eps)?;
        self.check_t(t)?;
        let b = self.betas[t];
        Ok(((x_prev * (1.0 - b).sqrt())? + (eps * b.sqrt())?)?)
    }

    /// Clean-data estimate `(x_t - √(1-ᾱ_t) · eps) / √ᾱ_t`; inverse of
    /// [`NoiseSchedule::q_sample`] for the exact noise.
    pub fn predict_x0(&self, x_t: &Tensor, eps_pred: &Tensor, t: usize) -> Result<Tensor> {
        same_shape(x_t, eps_pred)?;
        let ab = self.alpha_bar(t)?;
        Ok(((x_t - (eps_pred * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
    }

    /// Guidance scale `ω = √((1-ᾱ_t)/ᾱ_t)`, strictly increasing in `t`.
    pub fn mg_omega(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(omega_from_alpha_bar(ab))
    }
}

pub fn omega_from_alpha_bar(alpha_bar: f64) -> f64 {
    ((1.0 - alpha_bar) / alpha_bar).sqrt()
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "operand shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}
