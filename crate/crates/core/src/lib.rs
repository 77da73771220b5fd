//! Toy text-to-video diffusion built by inflating a frozen per-frame image
//! model: mapping network, frame-wise tokens, temporal regularization losses,
//! mitigating-gradient sampling and a noise-prior Gaussianity lab.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod losses;
pub mod model;
pub mod nn;
pub mod noise_prior;
pub mod optim;
pub mod run;
pub mod sampler;
pub mod train;
pub mod video;

pub use diffusion::{NoiseSchedule, ScheduleConfig};
pub use error::{Error, Result};
pub use model::{AttentionRecord, Mode, ModelConfig, T2VModel, TokenBundle};
pub use video::{ValueRange, VideoBatch};
