//! Sampling with and without mitigating-gradient guidance from one seed.
//!
//! ```text
//! cargo run --example mg_sampling -- [checkpoint dir] [out dir]
//! ```
//!
//! Without a checkpoint an untrained smoke-size model is used.

use std::path::PathBuf;

use t2v_inflate::checkpoint;
use t2v_inflate::cli::write_sample;
use t2v_inflate::config::RunConfig;
use t2v_inflate::eval::smoothness_metric;
use t2v_inflate::sampler::{sample_video, SamplerConfig};
use t2v_inflate::{ScheduleConfig, T2VModel};

fn main() -> t2v_inflate::Result<()> {
    let mut args = std::env::args().skip(1);
    let (model, schedule) = match args.next() {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            let meta = checkpoint::read_metadata(&dir)?;
            (checkpoint::load(&dir)?.model, meta.schedule.build()?)
        }
        None => (T2VModel::build(RunConfig::smoke().model, 0)?, ScheduleConfig::default().build()?),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "mg_sampling".into()));
    let caption = "yellow square moving right";

    for alpha in [0.0, 10.0, 40.0] {
        let cfg = SamplerConfig {
            mg_alpha: alpha,
            steps: 20,
            seed: 7,
            ..Default::default()
        };
        let sample = sample_video(&model, caption, &cfg, &schedule)?;
        let smooth = smoothness_metric(&sample.video.tensor().get(0)?)?;
        let peak = sample.trace.iter().map(|s| s.mean_abs_g).fold(0.0, f64::max);
        println!("alpha {alpha:>4}: smoothness {smooth:.4e}, max mean|G| {peak:.3e}");
        let dir = out.join(format!("alpha_{alpha}"));
        std::fs::create_dir_all(&dir)?;
        write_sample(&dir, &sample.video, &sample.trace)?;
    }
    println!("clips written under {}", out.display());
    Ok(())
}
