//! Command-line interface. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 2 on a usage
//! error, 1 on a runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::artifacts::{video_to_images, write_frames, write_gif, write_json, write_jsonl};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{caption_grid, evaluate};
use crate::inspect::{attention_maps, write_attention_report};
use crate::noise_prior::{gaussianity_experiment, NoiseKind, NoiseSpec, DEFAULT_SHARED_WEIGHT};
use crate::run::{run_pretrain, run_train, FINAL_DIR, PRETRAIN_DIR};
use crate::sampler::{sample_video, SamplerConfig};

/// Environment variable holding the log filter (`debug`, `info`, `warn`, ...).
pub const LOG_ENV: &str = "HARIVO_LOG";

pub const GIF_DELAY: u16 = 12;

#[derive(Debug, Parser)]
#[command(name = "t2v-inflate", version, about = "Inflate a toy text-to-image diffusion model into a text-to-video model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the spatial image model on single frames, then freeze it.
    Pretrain(PretrainArgs),
    /// Train temporal layers, mapping network, frame tokens and projection head.
    Train(TrainArgs),
    /// Generate one clip for a prompt.
    Sample(SampleArgs),
    /// Sample the caption grid and report smoothness and h-consistency.
    Eval(EvalArgs),
    /// Jarque-Bera pass rate of per-frame noise.
    AnalyzeNoise(NoiseArgs),
    /// Render cross-attention maps of the frame-wise and caption tokens.
    InspectAttn(InspectArgs),
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory; the phase writes into <out>/pretrain.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Starting checkpoint [default: <out>/pretrain/final].
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Mitigating-gradient strength; 0 disables it.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Config whose sampler section replaces the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate only the first N captions of the grid.
    #[arg(long)]
    limit: Option<usize>,
    /// Timestep at which h features are probed.
    #[arg(long, default_value_t = 200)]
    t_probe: usize,
}

#[derive(Debug, Args)]
struct NoiseArgs {
    #[arg(long)]
    kind: NoiseKind,
    /// Weight of the noise frame shared by all frames (correlated kind).
    #[arg(long)]
    shared_weight: Option<f64>,
    #[arg(long)]
    trials: usize,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
    /// Noise shape F,C,H,W.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 3, 32, 32])]
    shape: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write per-trial statistics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    t_probe: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
}

/// Installs the logger once; later calls are ignored.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let out = run_pretrain(&cfg, &a.out)?;
            report_phase(&out.records, &out.final_checkpoint);
            Ok(())
        }
        Command::Train(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let init = a.init.unwrap_or_else(|| a.out.join(PRETRAIN_DIR).join(FINAL_DIR));
            let out = run_train(&cfg, &init, &a.out)?;
            report_phase(&out.records, &out.final_checkpoint);
            Ok(())
        }
        Command::Sample(a) => sample(a),
        Command::Eval(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let meta = checkpoint::read_metadata(&a.checkpoint)?;
            let state = checkpoint::load_matching(&a.checkpoint, &cfg.model)?;
            let schedule = meta.schedule.build()?;
            let mut captions = caption_grid();
            if let Some(n) = a.limit {
                captions.truncate(n.max(1));
            }
            let report = evaluate(&state.model, &schedule, &cfg.sampler, &captions, a.t_probe)?;
            write_json(&a.out, &report)?;
            println!(
                "smoothness {:.6e}  h_consistency {:.4}  ({} videos) -> {}",
                report.smoothness,
                report.h_consistency,
                report.per_video.len(),
                a.out.display()
            );
            Ok(())
        }
        Command::AnalyzeNoise(a) => {
            let shape: [usize; 4] = a.shape.as_slice().try_into().map_err(|_| Error::Config("--shape takes four sizes".into()))?;
            let spec = match a.kind {
                NoiseKind::Iid => {
                    if a.shared_weight.is_some() {
                        return Err(Error::Config("--shared-weight applies only to --kind correlated".into()));
                    }
                    NoiseSpec::iid(shape, a.seed)
                }
                NoiseKind::Correlated => {
                    NoiseSpec::correlated(shape, a.shared_weight.unwrap_or(DEFAULT_SHARED_WEIGHT), a.seed)
                }
            };
            let report = gaussianity_experiment(&spec, a.trials)?;
            report.write_json(&a.out)?;
            if let Some(csv) = &a.csv {
                report.write_csv(csv)?;
            }
            println!(
                "{} noise: {:.2}% of {} trials pass Jarque-Bera at p > 0.05 -> {}",
                a.kind,
                100.0 * report.pass_rate,
                report.n_trials,
                a.out.display()
            );
            Ok(())
        }
        Command::InspectAttn(a) => {
            let meta = checkpoint::read_metadata(&a.checkpoint)?;
            let state = checkpoint::load(&a.checkpoint)?;
            let schedule = meta.schedule.build()?;
            if a.t_probe >= schedule.len() {
                return Err(Error::Config(format!("--t-probe must be below {}", schedule.len())));
            }
            let mut sampler = SamplerConfig {
                seed: a.seed,
                ..SamplerConfig::default()
            };
            if let Some(steps) = a.steps {
                sampler.steps = steps;
            }
            let video = sample_video(&state.model, &a.prompt, &sampler, &schedule)?;
            let clip = video.video.tensor().get(0)?;
            let maps = attention_maps(&state.model, &clip, &a.prompt, a.t_probe, &schedule, a.seed)?;
            let s = write_attention_report(&a.out, &maps, &a.prompt, a.t_probe)?;
            println!(
                "across-frame variance: frame tokens {:.3e}, caption tokens {:.3e} -> {}",
                s.frame_token_variance,
                s.text_token_variance,
                a.out.display()
            );
            Ok(())
        }
    }
}

fn sample(a: SampleArgs) -> Result<()> {
    let meta = checkpoint::read_metadata(&a.checkpoint)?;
    let state = checkpoint::load(&a.checkpoint)?;
    let schedule = meta.schedule.build()?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.sampler,
        None => SamplerConfig::default(),
    };
    if let Some(alpha) = a.alpha {
        cfg.mg_alpha = alpha;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = sample_video(&state.model, &a.prompt, &cfg, &schedule)?;
    write_sample(&a.out, &out.video, &out.trace)?;
    println!("{} frames -> {}", out.video.frames(), a.out.display());
    Ok(())
}

/// Writes `frame_0001.png`, ..., `clip.gif` and `trace.jsonl` into `dir`.
pub fn write_sample(dir: &Path, video: &crate::VideoBatch, trace: &[crate::sampler::TraceStep]) -> Result<()> {
    let frames = video_to_images(video, 0)?;
    write_frames(dir, &frames)?;
    write_gif(&dir.join("clip.gif"), &frames, GIF_DELAY)?;
    write_jsonl(&dir.join("trace.jsonl"), trace)
}

fn report_phase(records: &[crate::train::StepRecord], checkpoint: &Path) {
    let simple: Vec<f64> = records.iter().map(|r| r.simple).collect();
    match crate::train::smoothed_ends(&simple, 50) {
        Some((first, last)) => println!(
            "{} steps, smoothed simple loss {first:.5} -> {last:.5}; checkpoint {}",
            records.len(),
            checkpoint.display()
        ),
        None => println!("{} steps; checkpoint {}", records.len(), checkpoint.display()),
    }
}
