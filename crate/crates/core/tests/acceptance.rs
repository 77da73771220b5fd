//! Acceptance suite. Runs every criterion in order on one thread and prints
//! one PASS/FAIL line per criterion; the process fails if any criterion does.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use t2v_inflate::checkpoint;
use t2v_inflate::cli;
use t2v_inflate::config::RunConfig;
use t2v_inflate::data::{DataConfig, Dataset};
use t2v_inflate::eval::EvalReport;
use t2v_inflate::losses::{
    dc_loss, dc_loss_with, reg_loss, simple_loss, total_loss, trs_loss_maps, LossParts, LossWeights, NegativeQueue,
    DEFAULT_TAU,
};
use t2v_inflate::model::{Mode, ModelConfig, Precision, T2VModel};
use t2v_inflate::noise_prior::{gaussianity_experiment, NoiseSpec, DEFAULT_SHARED_WEIGHT};
use t2v_inflate::run::{FINAL_DIR, METRICS_FILE, PRETRAIN_DIR, TRAIN_DIR};
use t2v_inflate::sampler::{
    cfg_scale_at, initial_noise, mg_gradient, mg_guidance, prompt_tokens, sample_video, timestep_sequence,
    SamplerConfig,
};
use t2v_inflate::train::{pretrain_step, smoothed_ends, train_step, StepRecord, TrainConfig, TrainState};
use t2v_inflate::{NoiseSchedule, ScheduleConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    f64s(a).iter().zip(f64s(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn bits(t: &Tensor) -> Vec<u64> {
    f64s(t).iter().map(|v| v.to_bits()).collect()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

// 1
fn noise_prior() -> Outcome {
    let start = Instant::now();
    let shape = [8, 3, 32, 32];
    let iid = gaussianity_experiment(&NoiseSpec::iid(shape, 0), 10_000).map_err(e)?;
    let cor = gaussianity_experiment(&NoiseSpec::correlated(shape, DEFAULT_SHARED_WEIGHT, 0), 10_000).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "iid pass rate {:.4}, correlated {:.4}, {secs:.1} s",
        iid.pass_rate, cor.pass_rate
    );
    ensure!((0.924..=0.964).contains(&iid.pass_rate), "iid rate out of 94.4% ± 2: {detail}");
    ensure!(cor.pass_rate <= iid.pass_rate - 0.10, "correlated rate not 10 points lower: {detail}");
    ensure!(secs < 300.0, "took longer than five minutes: {detail}");
    Ok(detail)
}

// 2
fn identity_at_init() -> Outcome {
    let mut worst = 0.0f64;
    for (cfg, seed) in [(RunConfig::smoke().model, 0u64), (ModelConfig::tiny(), 7)] {
        let m = T2VModel::build(cfg.clone(), seed).map_err(e)?;
        let b = 2;
        let x = randn(&[b, cfg.frames, cfg.channels, cfg.height, cfg.width], seed + 1)
            .to_dtype(m.dtype())
            .unwrap();
        let mapped = m.mapping_forward(&x).map_err(e)?;
        ensure!(bits(&mapped) == bits(&x), "mapping_forward changed its input");
        let text = m.embed_captions(&["red square moving left", "blue circle moving up"]).map_err(e)?;
        let full = m.generate_frame_tokens(&text, Mode::Full).map_err(e)?;
        let image = m.generate_frame_tokens(&text, Mode::ImageOnly).map_err(e)?;
        let ts = [731, 12];
        let (ef, _) = m.forward(&x, &ts, &full, Mode::Full, false).map_err(e)?;
        let (ei, _) = m.forward(&x, &ts, &image, Mode::ImageOnly, false).map_err(e)?;
        let frames = x.reshape((b * cfg.frames, cfg.channels, cfg.height, cfg.width)).unwrap();
        let per_frame: Vec<usize> = ts.iter().flat_map(|&t| std::iter::repeat_n(t, cfg.frames)).collect();
        let es = m.spatial_forward(&frames, &per_frame, &image.per_frame).map_err(e)?;
        let es = es.reshape(ef.dims()).unwrap();
        worst = worst.max(max_abs_diff(&ef, &ei)).max(max_abs_diff(&ef, &es));
    }
    ensure!(worst == 0.0, "full/image-only/spatial forwards differ by {worst:e}");
    Ok("full == image-only == spatial (max diff 0), mapping is the identity".into())
}

// 3
fn mg_suite() -> Outcome {
    let sched = NoiseSchedule::linear(1000, 0.00085, 0.012).map_err(e)?;
    let shape = [1, 4, 2, 3, 3];
    let eps = randn(&shape, 1);
    let x_t = randn(&shape, 2);

    let out = mg_guidance(&eps, &x_t, 600, &sched, 0.0).map_err(e)?;
    ensure!(bits(&out) == bits(&eps), "alpha = 0 changed the prediction");

    // Identical predicted frames: x_t and eps both repeat one frame.
    let repeat = |seed| randn(&[1, 1, 2, 3, 3], seed).broadcast_as((1, 4, 2, 3, 3)).unwrap().contiguous().unwrap();
    let (same_eps, same_x) = (repeat(3), repeat(6));
    let out = mg_guidance(&same_eps, &same_x, 600, &sched, 40.0).map_err(e)?;
    ensure!(bits(&out) == bits(&same_eps), "identical frames changed the prediction");

    let two = randn(&[1, 2, 1, 2, 2], 4);
    ensure!(mg_guidance(&two, &two, 10, &sched, 1.0).is_err(), "F = 2 was accepted");

    // F = 3, one pixel: closed form of the gradient.
    let t = 420;
    let ab: f64 = sched.betas()[..=t].iter().map(|b| 1.0 - b).product();
    let x_hat = [0.0, 1.0, 3.0];
    let noise = [0.3, -0.2, 0.5];
    let xt: Vec<f64> = x_hat.iter().zip(noise).map(|(x, n)| ab.sqrt() * x + (1.0 - ab).sqrt() * n).collect();
    let alpha = 2.5;
    let omega = ((1.0 - ab) / ab).sqrt();
    let s = 1.5f64.powi(2) / 2f64.ln();
    let g = |d: f64| 2.0 * (-d * d / s).exp() * d / s * omega;
    let expected = [noise[0], noise[1] + alpha * g(1.0), noise[2] + alpha * g(2.0)];
    let to_t = |v: &[f64]| Tensor::from_vec(v.to_vec(), (1, 3, 1, 1, 1), &Device::Cpu).unwrap();
    let got = f64s(&mg_guidance(&to_t(&noise), &to_t(&xt), t, &sched, alpha).map_err(e)?);
    let hand_err = got.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(hand_err < 1e-6, "hand example off by {hand_err:e}: {got:?} vs {expected:?}");

    let x_hat = randn(&shape, 5);
    let unit = f64s(&mg_gradient(&x_hat, 1.0).map_err(e)?);
    let mut scale_err = 0.0f64;
    for t in [1, 100, 250, 500, 750, 999] {
        let ab: f64 = sched.betas()[..=t].iter().map(|b| 1.0 - b).product();
        let omega = ((1.0 - ab) / ab).sqrt();
        let lib_omega = sched.mg_omega(t).map_err(e)?;
        ensure!((lib_omega - omega).abs() <= 1e-12 * omega, "mg_omega({t}) = {lib_omega}, expected {omega}");
        let g = f64s(&mg_gradient(&x_hat, lib_omega).map_err(e)?);
        for (a, u) in g.iter().zip(&unit) {
            if *u != 0.0 {
                scale_err = scale_err.max((a / (u * lib_omega) - 1.0).abs());
            }
        }
    }
    ensure!(scale_err < 1e-12, "gradient not proportional to omega (rel err {scale_err:e})");
    Ok(format!("no-ops bit-exact, F=2 rejected, hand example err {hand_err:.1e}, omega scaling err {scale_err:.1e}"))
}

// 4
fn loss_goldens() -> Outcome {
    let maps = |v: &[f64], shape: &[usize]| Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap();
    let a = maps(&[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0], &[1, 2, 1, 2, 2]);
    let same = maps(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], &[1, 2, 1, 2, 2]);
    let trs1 = scalar(&trs_loss_maps(std::slice::from_ref(&a)).map_err(e)?);
    let trs_half = scalar(&trs_loss_maps(&[a, same]).map_err(e)?);

    let v = |x: &[f64]| Tensor::from_vec(x.to_vec(), x.len(), &Device::Cpu).unwrap();
    let queue = |row: &[f64]| {
        let mut q = NegativeQueue::new(4).unwrap();
        q.push(&v(row).unsqueeze(0).unwrap(), &[0]).unwrap();
        q
    };
    let z = v(&[1.0, 0.0]);
    let dc_lo = scalar(&dc_loss(&z, &z, &queue(&[0.0, 1.0]), DEFAULT_TAU).map_err(e)?);
    let dc_hi = scalar(&dc_loss(&z, &v(&[0.0, 1.0]), &queue(&[1.0, 0.0]), DEFAULT_TAU).map_err(e)?);

    let ones = Tensor::ones((2, 3, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
    let zeros = ones.zeros_like().unwrap();
    let reg = scalar(&reg_loss(&ones, &zeros, 500, 1000).map_err(e)?);

    let unit = LossParts {
        simple: 1.0,
        reg: 1.0,
        trs: 1.0,
        dc: 1.0,
    };
    let total = total_loss(unit, LossWeights::default()).map_err(e)?.total;

    let checks = [
        ("trs", trs1, 1.0),
        ("trs (weighted layer)", trs_half, 0.5),
        ("dc (aligned)", dc_lo, -10.0),
        ("dc (opposed)", dc_hi, 10.0),
        ("reg", reg, 0.5),
        ("total", total, 1.3),
    ];
    for (name, got, want) in checks {
        ensure!((got - want).abs() < 1e-6, "{name}: {got} != {want}");
    }
    Ok(format!(
        "trs {trs1} / {trs_half}, dc {dc_lo:.6} / {dc_hi:.6}, reg {reg}, total {total:.6}"
    ))
}

/// Relative error `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)` of the
/// gradient of `f` at `x`.
fn grad_error(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = f64s(grads.get(var.as_tensor()).expect("input received no gradient"));
    let base = f64s(x);
    let h = 1e-5;
    let eval = |v: Vec<f64>| scalar(&f(&Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap()));
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += h;
            m[i] -= h;
            (eval(p) - eval(m)) / (2.0 * h)
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-300)
}

// 5
fn gradient_checks() -> Outcome {
    let target = randn(&[2, 3, 1, 2, 2], 10);
    let other = randn(&[2, 3, 1, 2, 2], 11);
    let maps = [randn(&[1, 3, 2, 4], 12), randn(&[1, 3, 2, 4], 13)];
    let z2 = randn(&[3, 4], 14);
    let negatives = randn(&[5, 4], 15);

    let mut cfg = ModelConfig::tiny();
    cfg.precision = Precision::F64;
    let model = T2VModel::build(cfg.clone(), 3).map_err(e)?;
    let (hh, hw) = cfg.bottleneck_hw();
    let c = cfg.bottleneck_channels();
    let readout = randn(&[c], 16);

    let cases: Vec<(&str, Box<dyn Fn(&Tensor) -> Tensor + '_>, Tensor)> = vec![
        ("simple", Box::new(|x: &Tensor| simple_loss(x, &target).unwrap()), randn(&[2, 3, 1, 2, 2], 20)),
        ("reg (full)", Box::new(|x: &Tensor| reg_loss(x, &other, 300, 1000).unwrap()), randn(&[2, 3, 1, 2, 2], 21)),
        ("reg (image)", Box::new(|x: &Tensor| reg_loss(&other, x, 300, 1000).unwrap()), randn(&[2, 3, 1, 2, 2], 22)),
        (
            "trs",
            Box::new(|x: &Tensor| trs_loss_maps(&[x.clone(), maps[1].clone()]).unwrap()),
            maps[0].clone(),
        ),
        (
            "trs (second layer)",
            Box::new(|x: &Tensor| trs_loss_maps(&[maps[0].clone(), x.clone()]).unwrap()),
            maps[1].clone(),
        ),
        ("dc (z1)", Box::new(|x: &Tensor| dc_loss_with(x, &z2, &negatives, 0.5).unwrap()), randn(&[3, 4], 23)),
        ("dc (z2)", Box::new(|x: &Tensor| dc_loss_with(&z2, x, &negatives, 0.5).unwrap()), randn(&[3, 4], 24)),
        (
            "project_h",
            Box::new(|x: &Tensor| model.project_h(x).unwrap().mul(&readout).unwrap().sum_all().unwrap()),
            randn(&[c, hh, hw], 25),
        ),
    ];
    let mut parts = Vec::new();
    for (name, f, x) in &cases {
        let err = grad_error(f.as_ref(), x);
        ensure!(err < 1e-3, "{name}: relative gradient error {err:e}");
        parts.push(format!("{name} {err:.1e}"));
    }
    Ok(parts.join(", "))
}

// 6
fn reparametrization() -> Outcome {
    let sched = ScheduleConfig {
        train_steps: 10,
        ..Default::default()
    }
    .build()
    .map_err(e)?;
    let x0 = randn(&[4, 3, 8, 8], 30);
    let eps = randn(&[4, 3, 8, 8], 31);
    let mut worst = 0.0f64;
    for t in 0..10 {
        let x_t = sched.q_sample(&x0, t, &eps).map_err(e)?;
        worst = worst.max(max_abs_diff(&sched.predict_x0(&x_t, &eps, t).map_err(e)?, &x0));
    }
    ensure!(worst < 1e-5, "predict_x0 after q_sample is off by {worst:e}");

    let n = 10_000;
    let start = 0.7;
    let mut x = Tensor::full(start, n, &Device::Cpu).unwrap();
    let mut worst_sigma = 0.0f64;
    let mut ab = 1.0;
    for t in 0..10 {
        x = sched.forward_step(&x, t, &randn(&[n], 100 + t as u64)).map_err(e)?;
        ab *= 1.0 - sched.betas()[t];
        let v = f64s(&x);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_var = 1.0 - ab;
        let z_mean = (mean - ab.sqrt() * start).abs() / (want_var / n as f64).sqrt();
        let z_var = (var - want_var).abs() / (want_var * (2.0 / (n - 1) as f64).sqrt());
        worst_sigma = worst_sigma.max(z_mean).max(z_var);
    }
    ensure!(worst_sigma < 3.0, "iterated forward moments off by {worst_sigma:.2} sigma");
    Ok(format!("round trip err {worst:.1e}, moments within {worst_sigma:.2} sigma"))
}

struct SmokeRun {
    dir: tempfile::TempDir,
    elapsed: Duration,
    pretrain: Vec<StepRecord>,
    train: Vec<StepRecord>,
}

fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, String> {
    fs::read_to_string(path)
        .map_err(e)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(e))
        .collect()
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["t2v-inflate"];
    argv.extend_from_slice(args);
    match cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn smoke_run() -> Result<SmokeRun, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let root = dir.path();
    let cfg_path = root.join("smoke.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&RunConfig::smoke()).unwrap()).map_err(e)?;
    let cfg = cfg_path.to_str().unwrap();
    let out = root.join("run");
    let out = out.to_str().unwrap();
    let start = Instant::now();
    cli(&["pretrain", "--config", cfg, "--out", out])?;
    cli(&["train", "--config", cfg, "--out", out])?;
    let elapsed = start.elapsed();
    let run = root.join("run");
    Ok(SmokeRun {
        pretrain: read_metrics(&run.join(PRETRAIN_DIR).join(METRICS_FILE))?,
        train: read_metrics(&run.join(TRAIN_DIR).join(METRICS_FILE))?,
        dir,
        elapsed,
    })
}

// 7
fn freeze_contract(run: &SmokeRun) -> Outcome {
    let run_dir = run.dir.path().join("run");
    let frozen = checkpoint::load(&run_dir.join(PRETRAIN_DIR).join(FINAL_DIR)).map_err(e)?;
    let reference = frozen.model.spatial_hash().map_err(e)?;
    let train = run_dir.join(TRAIN_DIR);
    let mut seen = 0;
    for sub in ["step_000100", FINAL_DIR] {
        let state = checkpoint::load(&train.join(sub)).map_err(e)?;
        let hash = state.model.spatial_hash().map_err(e)?;
        ensure!(hash == reference, "spatial hash changed by {sub} (step {})", state.step);
        seen = state.step;
    }
    ensure!(seen == 200, "inflation ran {seen} steps, expected 200");
    Ok(format!("spatial hash {}… unchanged after 100 and 200 steps", &reference[..12]))
}

// 8
fn smoke(run: &SmokeRun) -> Outcome {
    let secs = run.elapsed.as_secs_f64();
    ensure!(run.pretrain.len() == 500 && run.train.len() == 200, "unexpected step counts");
    let simple = |r: &[StepRecord]| r.iter().map(|s| s.simple).collect::<Vec<_>>();
    let (p0, p1) = smoothed_ends(&simple(&run.pretrain), 50).unwrap();
    let (t0, t1) = smoothed_ends(&simple(&run.train), 50).unwrap();
    let cfg = RunConfig::smoke();
    let dataset = Dataset::open(&cfg.data, 4, 3, 16, 16).map_err(e)?;
    ensure!(dataset.len() == 4, "smoke set has {} clips", dataset.len());
    let detail = format!(
        "{secs:.0} s; smoothed L_simple pretrain {p0:.4} -> {p1:.4}, inflation {t0:.5} -> {t1:.5}"
    );
    ensure!(secs < 15.0 * 60.0, "training took longer than 15 minutes: {detail}");
    ensure!(p1 < p0, "pretraining loss did not decrease: {detail}");
    ensure!(t1 < t0, "inflation loss did not decrease: {detail}");

    let root = run.dir.path();
    let ckpt = root.join("run").join(TRAIN_DIR).join(FINAL_DIR);
    let ckpt = ckpt.to_str().unwrap();
    let mut outputs = Vec::new();
    for name in ["sample_a", "sample_b"] {
        let out = root.join(name);
        cli(&[
            "sample",
            "--checkpoint",
            ckpt,
            "--prompt",
            "red square moving right",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ])?;
        let mut files: Vec<_> = fs::read_dir(&out).map_err(e)?.map(|d| d.unwrap().path()).collect();
        files.sort();
        let contents: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()))
            .collect();
        outputs.push(contents);
    }
    ensure!(outputs[0] == outputs[1], "two sample runs with the same seed differ");
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    ensure!(
        names.contains(&"frame_0001.png") && names.contains(&"clip.gif") && names.contains(&"trace.jsonl"),
        "sample output is missing files: {names:?}"
    );

    let report = root.join("eval.json");
    let cfg_path = root.join("smoke.json");
    cli(&[
        "eval",
        "--checkpoint",
        ckpt,
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--limit",
        "4",
    ])?;
    let report: EvalReport = serde_json::from_slice(&fs::read(&report).map_err(e)?).map_err(e)?;
    ensure!(
        report.smoothness.is_finite() && report.h_consistency.is_finite() && report.per_video.len() == 4,
        "eval report is incomplete"
    );
    Ok(format!(
        "{detail}; sample deterministic; eval smoothness {:.3e}, h-consistency {:.4}",
        report.smoothness, report.h_consistency
    ))
}

// 9
fn checkpoint_round_trip() -> Outcome {
    let model = T2VModel::build(ModelConfig::tiny(), 4).map_err(e)?;
    let ds = Dataset::open(&DataConfig::Synthetic { clips: 4, seed: 2 }, 3, 3, 8, 8).map_err(e)?;
    let sched = NoiseSchedule::linear(100, 0.00085, 0.012).map_err(e)?;
    let tc = TrainConfig {
        batch_size: 2,
        ..Default::default()
    };
    let mut state = TrainState::new(model).map_err(e)?;
    for _ in 0..2 {
        pretrain_step(&mut state, &ds, &sched, &tc).map_err(e)?;
    }
    state.begin_inflation().map_err(e)?;
    for _ in 0..3 {
        train_step(&mut state, &ds, &sched, &tc).map_err(e)?;
    }
    let dir = tempfile::tempdir().map_err(e)?;
    let schedule_cfg = ScheduleConfig {
        train_steps: 100,
        ..Default::default()
    };
    checkpoint::save(&state, &schedule_cfg, dir.path()).map_err(e)?;
    let mut restored = checkpoint::load(dir.path()).map_err(e)?;
    let a = train_step(&mut state, &ds, &sched, &tc).map_err(e)?.0;
    let b = train_step(&mut restored, &ds, &sched, &tc).map_err(e)?.0;
    ensure!(a == b, "resumed step differs: {a:?} vs {b:?}");
    ensure!(a.total.to_bits() == b.total.to_bits(), "total differs in bits");
    Ok(format!("resumed step reproduces total {:.6} bit-exactly", a.total))
}

// 10
fn sampler_equivalences() -> Outcome {
    let model = T2VModel::build(ModelConfig::tiny(), 5).map_err(e)?;
    let sched = NoiseSchedule::linear(1000, 0.00085, 0.012).map_err(e)?;
    let config = SamplerConfig {
        steps: 6,
        mg_alpha: 0.0,
        seed: 11,
        ..Default::default()
    };
    let caption = "green triangle moving up";
    let sampled = sample_video(&model, caption, &config, &sched).map_err(e)?;

    // Plain CFG-DDIM.
    let (cond, uncond) = prompt_tokens(&model, caption).map_err(e)?;
    let mut x = initial_noise(&model, &mut ChaCha8Rng::seed_from_u64(config.seed)).map_err(e)?;
    let ts = timestep_sequence(config.steps, 1000).map_err(e)?;
    for (i, &t) in ts.iter().enumerate() {
        let scale = if t >= 700 { 12.5 } else { 7.5 };
        let (c, _) = model.forward(&x, &[t], &cond, Mode::Full, false).map_err(e)?;
        let (u, _) = model.forward(&x, &[t], &uncond, Mode::Full, false).map_err(e)?;
        let eps = (&u + ((c - &u).unwrap() * scale).unwrap()).unwrap();
        let ab = sched.alpha_bars()[t];
        let x0 = ((&x - (&eps * (1.0 - ab).sqrt()).unwrap()).unwrap() / ab.sqrt()).unwrap();
        x = match ts.get(i + 1) {
            Some(&p) => {
                let ap = sched.alpha_bars()[p];
                ((x0 * ap.sqrt()).unwrap() + (eps * (1.0 - ap).sqrt()).unwrap()).unwrap()
            }
            None => x0,
        };
    }
    let plain = x.clamp(-1f64, 1f64).unwrap();
    ensure!(bits(sampled.video.tensor()) == bits(&plain), "alpha = 0 sampling differs from plain CFG-DDIM");

    let d = SamplerConfig::default();
    let hi = cfg_scale_at(&d, 800, 1000);
    let lo = cfg_scale_at(&d, 500, 1000);
    ensure!(hi == 12.5 && lo == 7.5, "cfg schedule gives {hi} at 0.8T and {lo} at 0.5T");
    Ok(format!("alpha = 0 equals plain CFG-DDIM bit-exactly, cfg {hi} at 0.8T and {lo} at 0.5T"))
}

fn guarded<F: FnOnce() -> Outcome>(f: F) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // `cargo test -- --list` and filters from the default harness.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("PASS [{n:>2}] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{n:>2}] {name}: {why}");
            }
        }
    };
    report(1, "noise prior Gaussianity", guarded(noise_prior));
    report(2, "identity at initialization", guarded(identity_at_init));
    report(3, "mitigating-gradient guidance", guarded(mg_suite));
    report(4, "loss golden values", guarded(loss_goldens));
    report(5, "gradient checks", guarded(gradient_checks));
    report(6, "reparametrization", guarded(reparametrization));
    match guarded_run() {
        Ok(run) => {
            report(7, "spatial freeze contract", guarded(|| freeze_contract(&run)));
            report(8, "end-to-end smoke run", guarded(|| smoke(&run)));
        }
        Err(why) => {
            report(7, "spatial freeze contract", Err(why.clone()));
            report(8, "end-to-end smoke run", Err(why));
        }
    }
    report(9, "checkpoint round trip", guarded(checkpoint_round_trip));
    report(10, "sampler equivalences", guarded(sampler_equivalences));
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn guarded_run() -> Result<SmokeRun, String> {
    match panic::catch_unwind(smoke_run) {
        Ok(r) => r,
        Err(_) => Err("smoke run panicked".into()),
    }
}
