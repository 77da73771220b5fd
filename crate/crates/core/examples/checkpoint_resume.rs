//! Saving mid-run and resuming reproduces the uninterrupted trajectory.

use t2v_inflate::checkpoint::{load, read_metadata, save};
use t2v_inflate::data::{DataConfig, Dataset};
use t2v_inflate::train::{pretrain_step, train_step, TrainConfig, TrainState};
use t2v_inflate::{ModelConfig, ScheduleConfig, T2VModel};

fn main() -> t2v_inflate::Result<()> {
    let model_cfg = ModelConfig::tiny();
    let schedule_cfg = ScheduleConfig::default();
    let schedule = schedule_cfg.build()?;
    let data = Dataset::open(&DataConfig::Synthetic { clips: 4, seed: 0 }, 3, 3, 8, 8)?;
    let tc = TrainConfig::default();

    let mut state = TrainState::new(T2VModel::build(model_cfg, 0)?)?;
    for _ in 0..5 {
        pretrain_step(&mut state, &data, &schedule, &tc)?;
    }
    state.begin_inflation()?;
    for _ in 0..5 {
        train_step(&mut state, &data, &schedule, &tc)?;
    }

    let dir = tempfile::tempdir()?;
    save(&state, &schedule_cfg, dir.path())?;
    let meta = read_metadata(dir.path())?;
    println!("saved step {} ({}), {} queue entries", meta.step, meta.phase, state.queue.len());
    for (file, digest) in &meta.sha256 {
        println!("  {file:<14} {}", &digest[..16]);
    }

    let mut resumed = load(dir.path())?;
    for _ in 0..3 {
        let a = train_step(&mut state, &data, &schedule, &tc)?.0;
        let b = train_step(&mut resumed, &data, &schedule, &tc)?.0;
        println!("step total {:.6} vs {:.6}  identical: {}", a.total, b.total, a == b);
    }
    Ok(())
}
