//! Both training phases on synthetic clips, with smoothed loss summaries.
//!
//! ```text
//! cargo run --release --example train_smoke -- [pretrain steps] [train steps] [out dir]
//! ```

use std::path::PathBuf;

use t2v_inflate::config::RunConfig;
use t2v_inflate::run::{run_pretrain, run_train};
use t2v_inflate::train::{smoothed_ends, StepRecord};

fn summary(name: &str, records: &[StepRecord]) {
    let simple: Vec<f64> = records.iter().map(|r| r.simple).collect();
    if let Some((a, b)) = smoothed_ends(&simple, 50) {
        println!("{name}: smoothed L_simple {a:.5} -> {b:.5} over {} steps", records.len());
    }
}

fn main() -> t2v_inflate::Result<()> {
    t2v_inflate::cli::init_logging();
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::smoke();
    cfg.train.pretrain_steps = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    cfg.train.steps = args.next().and_then(|a| a.parse().ok()).unwrap_or(60);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "smoke_run".into()));

    let pre = run_pretrain(&cfg, &out)?;
    summary("pretrain", &pre.records);
    let hash = pre.state.model.spatial_hash()?;

    let train = run_train(&cfg, &pre.final_checkpoint, &out)?;
    summary("inflation", &train.records);
    let last = train.records.last().expect("at least one step");
    println!(
        "last step: reg {:.5} trs {:.5} dc {:.4} (active: {})",
        last.reg, last.trs, last.dc, last.dc_active
    );
    println!("spatial weights untouched: {}", train.state.model.spatial_hash()? == hash);
    println!("final checkpoint: {}", train.final_checkpoint.display());
    Ok(())
}
