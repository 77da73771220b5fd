//! Noise priors for video diffusion and a Jarque–Bera experiment measuring
//! how often a whole flattened noise video passes as Gaussian.
//!
//! IID noise passes at roughly the test's nominal rate. Mixing a component
//! shared by all frames keeps every frame marginally standard normal, but the
//! flattened video becomes a scale mixture and fails noticeably more often.

use std::path::Path;
use std::thread;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifacts::{write_atomic, write_json};
use crate::error::{Error, Result};
use crate::video::VideoBatch;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SHARED_WEIGHT: f64 = 0.7;
pub const P_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Iid,
    Correlated,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Iid => "iid",
            Self::Correlated => "correlated",
        })
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "correlated" => Ok(Self::Correlated),
            other => Err(Error::param(format!("unknown noise kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// `(F, C, H, W)`.
    pub shape: [usize; 4],
    /// Variance share of the frame-shared component; ignored for IID noise.
    pub shared_weight: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn iid(shape: [usize; 4], seed: u64) -> Self {
        Self {
            kind: NoiseKind::Iid,
            shape,
            shared_weight: 0.0,
            seed,
        }
    }

    pub fn correlated(shape: [usize; 4], shared_weight: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Correlated,
            shape,
            shared_weight,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::param(format!("noise shape has an empty dimension: {:?}", self.shape)));
        }
        if self.kind == NoiseKind::Correlated && !(0.0..=1.0).contains(&self.shared_weight) {
            return Err(Error::param(format!(
                "shared_weight must lie in [0, 1], got {}",
                self.shared_weight
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standard normal tensor of the given shape.
pub fn gaussian_tensor<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Fills one noise video, frame-major.
fn draw<R: Rng>(spec: &NoiseSpec, rng: &mut R, out: &mut Vec<f64>) {
    out.clear();
    let [f, c, h, w] = spec.shape;
    let per_frame = c * h * w;
    match spec.kind {
        NoiseKind::Iid => out.extend((0..f * per_frame).map(|_| rng.sample::<f64, _>(StandardNormal))),
        NoiseKind::Correlated => {
            let a = spec.shared_weight.sqrt();
            let b = (1.0 - spec.shared_weight).sqrt();
            let shared: Vec<f64> = (0..per_frame).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..f {
                out.extend(shared.iter().map(|s| a * s + b * rng.sample::<f64, _>(StandardNormal)));
            }
        }
    }
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// One noise video `(1, F, C, H, W)` drawn from `spec`.
pub fn sample_noise(spec: &NoiseSpec) -> Result<VideoBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.len());
    draw(spec, &mut rng, &mut values);
    let [f, c, h, w] = spec.shape;
    let t = Tensor::from_vec(values, (1, f, c, h, w), &Device::Cpu)?.to_dtype(DType::F32)?;
    VideoBatch::new(t, crate::video::ValueRange::Unbounded)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JarqueBera {
    pub statistic: f64,
    pub p_value: f64,
}

/// Jarque–Bera normality test with population moments:
/// `n/6 · (S² + (K-3)²/4)`, p-value from the χ²(2) survival function
/// `exp(-JB/2)`.
pub fn jarque_bera(sample: &[f64]) -> Result<JarqueBera> {
    let n = sample.len();
    if n < 8 {
        return Err(Error::param(format!("Jarque-Bera needs at least 8 values, got {n}")));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sample contains NaN or Inf".into()));
    }
    let nf = n as f64;
    let mean = sample.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in sample {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if m2 <= f64::EPSILON * mean.abs().max(1.0).powi(2) {
        return Err(Error::Degenerate("sample is constant".into()));
    }
    let skew = m3 / m2.powf(1.5);
    let excess = m4 / (m2 * m2) - 3.0;
    let statistic = nf / 6.0 * (skew * skew + excess * excess / 4.0);
    Ok(JarqueBera {
        statistic,
        p_value: (-statistic / 2.0).exp(),
    })
}

/// Outcome of a Gaussianity experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub schema_version: u32,
    pub kind: NoiseKind,
    pub shape: [usize; 4],
    pub shared_weight: Option<f64>,
    pub n_trials: usize,
    /// Fraction of trials with `p > 0.05`.
    pub pass_rate: f64,
    pub mean_statistic: f64,
    #[serde(skip)]
    pub trials: Vec<JarqueBera>,
}

impl GaussianityReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Per-trial `trial,statistic,p_value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trial", "statistic", "p_value"])
            .map_err(|e| Error::Io(e.into()))?;
        for (i, t) in self.trials.iter().enumerate() {
            w.serialize((i, t.statistic, t.p_value)).map_err(|e| Error::Io(e.into()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(path, &bytes)
    }
}

/// Draws `n_trials` noise videos, flattens each one and applies
/// [`jarque_bera`]. Trial `i` uses its own random stream derived from
/// `(spec.seed, i)`, so results do not depend on how trials are scheduled
/// across threads.
pub fn gaussianity_experiment(spec: &NoiseSpec, n_trials: usize) -> Result<GaussianityReport> {
    spec.validate()?;
    if n_trials < 1 {
        return Err(Error::param("n_trials must be >= 1"));
    }
    if spec.len() < 8 {
        return Err(Error::param("noise videos need at least 8 values for the test"));
    }
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(n_trials);
    let chunk = n_trials.div_ceil(workers);
    let results: Vec<Result<Vec<JarqueBera>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                s.spawn(move || {
                    let mut buf = Vec::with_capacity(spec.len());
                    (k * chunk..((k + 1) * chunk).min(n_trials))
                        .map(|i| {
                            draw(spec, &mut trial_rng(spec.seed, i as u64), &mut buf);
                            jarque_bera(&buf)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("trial worker panicked")).collect()
    });
    let mut trials = Vec::with_capacity(n_trials);
    for r in results {
        trials.extend(r?);
    }
    let passed = trials.iter().filter(|t| t.p_value > P_THRESHOLD).count();
    let mean_statistic = trials.iter().map(|t| t.statistic).sum::<f64>() / n_trials as f64;
    Ok(GaussianityReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: spec.kind,
        shape: spec.shape,
        shared_weight: (spec.kind == NoiseKind::Correlated).then_some(spec.shared_weight),
        n_trials,
        pass_rate: passed as f64 / n_trials as f64,
        mean_statistic,
        trials,
    })
}

/// Uniform draws on `[-1, 1]`, for contrast with Gaussian samples.
pub fn uniform_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
}
