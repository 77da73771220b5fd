//! Whole training phases as the command line runs them: the step loop,
//! periodic checkpoints and the metrics log.
//!
//! A phase writes into `<out>/<phase dir>/`: `step_NNNNNN/` checkpoints every
//! `checkpoint_interval` steps, `final/` at the end and `metrics.jsonl` with
//! one [`StepRecord`] per step.

use std::path::{Path, PathBuf};

use crate::artifacts::write_jsonl;
use crate::checkpoint::{self, save};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::T2VModel;
use crate::train::{pretrain_step, train_step, Phase, StepRecord, TrainState};

pub const PRETRAIN_DIR: &str = "pretrain";
pub const TRAIN_DIR: &str = "train";
pub const FINAL_DIR: &str = "final";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub struct PhaseOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let m = &cfg.model;
    Dataset::open(&cfg.data, m.frames, m.channels, m.height, m.width)
}

fn log_record(r: &StepRecord, total_steps: u64) {
    log::info!(
        "{} step {}/{} lr {:.2e} simple {:.5} reg {:.5} trs {:.5} dc {:.4} total {:.5}",
        r.phase,
        r.step + 1,
        total_steps,
        r.lr,
        r.simple,
        r.reg,
        r.trs,
        r.dc,
        r.total
    );
}

fn drive(
    mut state: TrainState,
    cfg: &RunConfig,
    dir: &Path,
    total_steps: u64,
    mut step: impl FnMut(&mut TrainState) -> Result<StepRecord>,
) -> Result<PhaseOutcome> {
    let metrics = dir.join(METRICS_FILE);
    let mut records = Vec::new();
    while state.step < total_steps {
        let record = step(&mut state)?;
        let done = state.step;
        if done % cfg.train.log_interval == 0 || done == total_steps {
            log_record(&record, total_steps);
        }
        records.push(record);
        if done % cfg.train.log_interval == 0 {
            write_jsonl(&metrics, &records)?;
        }
        if done % cfg.train.checkpoint_interval == 0 && done < total_steps {
            save(&state, &cfg.schedule, &dir.join(format!("step_{done:06}")))?;
        }
    }
    write_jsonl(&metrics, &records)?;
    let final_checkpoint = dir.join(FINAL_DIR);
    save(&state, &cfg.schedule, &final_checkpoint)?;
    Ok(PhaseOutcome {
        state,
        records,
        final_checkpoint,
    })
}

/// Trains the spatial model from a fresh initialization and freezes it.
/// Output goes to `<out>/pretrain/`.
pub fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let dataset = open_dataset(cfg)?;
    let model = T2VModel::build(cfg.model.clone(), cfg.model.seed)?;
    let state = TrainState::new(model)?;
    let dir = out.join(PRETRAIN_DIR);
    log::info!("pretraining for {} steps into {}", cfg.train.pretrain_steps, dir.display());
    let total = cfg.train.pretrain_steps;
    let train = &cfg.train;
    let outcome = drive(state, cfg, &dir, total, |s| pretrain_step(s, &dataset, &schedule, train))?;
    outcome.state.model.freeze_spatial();
    save(&outcome.state, &cfg.schedule, &outcome.final_checkpoint)?;
    Ok(outcome)
}

/// Trains the inflation parts starting from the checkpoint at `init`: a
/// finished pretraining run, or an inflation checkpoint to resume. Output
/// goes to `<out>/train/`.
pub fn run_train(cfg: &RunConfig, init: &Path, out: &Path) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let dataset = open_dataset(cfg)?;
    let mut state = checkpoint::load_matching(init, &cfg.model)?;
    match state.phase {
        Phase::PretrainSpatial => state.begin_inflation()?,
        Phase::TrainTemporal => {
            if !state.model.is_spatial_frozen() {
                return Err(Error::State(format!("{}: spatial parameters are not frozen", init.display())));
            }
            log::info!("resuming inflation training at step {}", state.step);
        }
    }
    let dir = out.join(TRAIN_DIR);
    log::info!("training inflation parts for {} steps into {}", cfg.train.steps, dir.display());
    let total = cfg.train.steps;
    let train = &cfg.train;
    drive(state, cfg, &dir, total, |s| Ok(train_step(s, &dataset, &schedule, train)?.1))
}
