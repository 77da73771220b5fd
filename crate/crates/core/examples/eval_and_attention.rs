//! Smoothness and h-consistency of sampled clips, and the cross-attention
//! maps of the frame-wise tokens.
//!
//! ```text
//! cargo run --release --example eval_and_attention -- [checkpoint dir] [out dir]
//! ```

use std::fs;
use std::path::PathBuf;

use t2v_inflate::checkpoint;
use t2v_inflate::config::RunConfig;
use t2v_inflate::eval::{caption_grid, evaluate};
use t2v_inflate::inspect::{attention_maps, write_attention_report};
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
    let out = PathBuf::from(args.next().unwrap_or_else(|| "eval_and_attention".into()));
    fs::create_dir_all(&out)?;

    let sampler = SamplerConfig {
        steps: 10,
        ..Default::default()
    };
    let captions: Vec<String> = caption_grid().into_iter().step_by(23).collect();
    let report = evaluate(&model, &schedule, &sampler, &captions, 200)?;
    for v in &report.per_video {
        println!("{:<28} smoothness {:.4e}  h-consistency {:.4}", v.caption, v.smoothness, v.h_consistency);
    }
    println!("mean: smoothness {:.4e}, h-consistency {:.4}", report.smoothness, report.h_consistency);

    let caption = &captions[0];
    let clip = sample_video(&model, caption, &sampler, &schedule)?.video.tensor().get(0)?;
    let maps = attention_maps(&model, &clip, caption, 200, &schedule, 0)?;
    let summary = write_attention_report(&out, &maps, caption, 200)?;
    println!(
        "attention {}x{}: across-frame variance frame tokens {:.3e}, caption tokens {:.3e}",
        summary.map_h, summary.map_w, summary.frame_token_variance, summary.text_token_variance
    );
    println!("heatmaps in {}", out.display());
    Ok(())
}
