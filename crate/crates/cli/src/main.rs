//! `cmt`: synthetic data, reconstruction pre-training, detector training,
//! detection, evaluation and gradient checks.

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cmt::eval::{filter_reasonable, format_curve, log_avg_miss_rate, EvalConfig, ImageGts};
use cmt::gradcheck::{run_suite, TOLERANCE};
use cmt::inference::{detect, load_detections, write_detections, DetectConfig, Detection};
use cmt::msdn::{format_msdn_log, train_msdn, MsdnConfig, MsdnModel, MsdnSample, MsdnTrainConfig};
use cmt::proposals::load_boxes;
use cmt::rrn::{format_rrn_log, train_rrn, FlipMode, RrnModel, RrnSample, RrnTrainConfig};
use cmt::synthdata::netpbm::read_image;
use cmt::synthdata::{generate_dataset, read_dataset, read_manifest, write_dataset, Condition, DatasetConfig, Frame};
use cmt::trunk::TrunkConfig;
use cmt::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Small widths and 128-pixel frames.
    Desk,
    /// Published widths, learning rates and 800-pixel frames.
    Paper,
}

impl Preset {
    fn trunk(self) -> TrunkConfig {
        match self {
            Preset::Desk => TrunkConfig::desk(),
            Preset::Paper => TrunkConfig::paper(),
        }
    }

    fn msdn(self) -> MsdnConfig {
        match self {
            Preset::Desk => MsdnConfig::desk(),
            Preset::Paper => MsdnConfig::paper(),
        }
    }

    fn image_height(self) -> usize {
        match self {
            Preset::Desk => 128,
            Preset::Paper => 800,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Flip {
    Off,
    Double,
    Random,
}

impl From<Flip> for FlipMode {
    fn from(f: Flip) -> Self {
        match f {
            Flip::Off => FlipMode::Off,
            Flip::Double => FlipMode::Double,
            Flip::Random => FlipMode::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subset {
    All,
    Day,
    Night,
}

#[derive(Debug, Parser)]
#[command(name = "cmt", version, about = "Cross-modality transfer pedestrian detection on synthetic RGB-thermal data")]
struct Cli {
    /// Model widths, learning rates and frame size.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Seed for every random choice (falls back to CMT_SEED, then 0).
    #[arg(long, global = true, env = "CMT_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker cap. Every subcommand currently runs on one worker.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// File of `key = value` lines; keys are flag names, explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0.5)]
        night_frac: f64,
        /// Frame height (default from the preset).
        #[arg(long)]
        height: Option<usize>,
        /// Frame width (default three quarters of the height).
        #[arg(long)]
        width: Option<usize>,
    },
    /// Pre-train the region reconstruction network on RGB/thermal pairs.
    TrainRrn {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// CSV training log to write.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum, default_value = "double")]
        flip: Flip,
        /// Use raw thermal frames as targets.
        #[arg(long)]
        no_preprocess: bool,
        #[arg(long, default_value_t = -70.0, allow_negative_numbers = true)]
        score_threshold: f64,
        /// Use every n-th frame.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Train the detector: Sub-Net A alone, then both sub-nets end to end.
    TrainMsdn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Reconstruction checkpoint whose trunk initialises Sub-Net B (random otherwise).
        #[arg(long)]
        rrn: Option<PathBuf>,
        /// Also write the single-stream model from the end of phase 1.
        #[arg(long)]
        phase1_out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum, default_value = "double")]
        flip: Flip,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Run a detector checkpoint over every frame of a dataset.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Detection file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        nms_delta: f64,
        #[arg(long, default_value_t = 0.01)]
        score_floor: f64,
    },
    /// Log-average miss rate of a detection file against dataset ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        /// Curve CSV to write.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl From<cmt::Error> for Failure {
    fn from(e: cmt::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage_if(bad: bool, msg: impl FnOnce() -> String) -> Outcome {
    if bad {
        Err(Failure::Usage(msg()))
    } else {
        Ok(())
    }
}

fn check_lr(lr: Option<f64>) -> Outcome {
    usage_if(lr.is_some_and(|v| !(v >= 0.0 && v.is_finite())), || {
        format!("--lr must be a finite value >= 0, got {}", lr.unwrap())
    })
}

fn check_epochs(name: &str, e: Option<usize>) -> Outcome {
    usage_if(e == Some(0), || format!("--{name} must be >= 1"))
}

fn check_dir(dir: &Path) -> Outcome {
    if dir.join("manifest.txt").is_file() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{}: not a dataset directory (no manifest.txt)", dir.display())))
    }
}

fn frame_id(id: usize) -> String {
    format!("{id:06}")
}

fn gen_data(cli: &Cli, out: &Path, frames: usize, night_frac: f64, height: Option<usize>, width: Option<usize>) -> Outcome {
    usage_if(!(0.0..=1.0).contains(&night_frac), || {
        format!("--night-frac must be in [0, 1], got {night_frac}")
    })?;
    let h = height.unwrap_or(cli.preset.image_height());
    let w = width.unwrap_or(h * 3 / 4);
    let mut cfg = DatasetConfig {
        frames,
        night_frac,
        seed: cli.seed,
        ..Default::default()
    };
    cfg.scene.height = h;
    cfg.scene.width = w;
    cfg.scene.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = generate_dataset(&cfg)?;
    fs::create_dir_all(out)?;
    write_dataset(out, &data)?;
    let night = data.iter().filter(|f| f.scene.condition == Condition::Night).count();
    let peds: usize = data.iter().map(|f| f.scene.gts.len()).sum();
    let props: usize = data.iter().map(|f| f.proposals.len()).sum();
    println!(
        "wrote {} frames ({} day, {night} night) of {h}x{w}: {peds} pedestrians, {props} proposals -> {}",
        data.len(),
        data.len() - night,
        out.display()
    );
    Ok(())
}

fn load_frames(dir: &Path, stride: usize) -> Result<Vec<Frame>, Failure> {
    usage_if(stride == 0, || "--stride must be >= 1".into())?;
    check_dir(dir)?;
    let frames = read_dataset(dir, stride)?;
    if frames.is_empty() {
        return Err(Failure::Data(format!("{}: dataset has no frames", dir.display())));
    }
    Ok(frames)
}

#[allow(clippy::too_many_arguments)]
fn train_rrn_cmd(
    cli: &Cli,
    data: &Path,
    out: &Path,
    log: &Path,
    epochs: Option<usize>,
    lr: Option<f64>,
    flip: Flip,
    no_preprocess: bool,
    score_threshold: f64,
    stride: usize,
) -> Outcome {
    check_lr(lr)?;
    check_epochs("epochs", epochs)?;
    let base = match cli.preset {
        Preset::Desk => RrnTrainConfig::default(),
        Preset::Paper => RrnTrainConfig::paper(),
    };
    let cfg = RrnTrainConfig {
        learning_rate: lr.unwrap_or(base.learning_rate),
        epochs: epochs.unwrap_or(base.epochs),
        proposal_score_threshold: score_threshold,
        seed: cli.seed,
        flip: flip.into(),
        preprocess_thermal: !no_preprocess,
        ..base
    };
    let frames = load_frames(data, stride)?;
    let samples: Vec<RrnSample> = frames
        .into_iter()
        .map(|f| RrnSample {
            rgb: f.scene.rgb,
            thermal: f.scene.thermal,
            proposals: f.proposals,
        })
        .collect();
    let mut model = RrnModel::new(cli.preset.trunk(), &mut Rng::derive(cli.seed, 7))?;
    let entries = train_rrn(&mut model, &samples, &cfg)?;
    model.save(out)?;
    fs::write(log, format_rrn_log(&entries))?;
    let first = entries.first().map_or(0.0, |e| e.loss);
    let last = entries.last().map_or(0.0, |e| e.loss);
    println!(
        "trained rrn for {} steps (loss {first:.6} -> {last:.6}) -> {}",
        entries.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_msdn_cmd(
    cli: &Cli,
    data: &Path,
    out: &Path,
    log: &Path,
    rrn: Option<&Path>,
    phase1_out: Option<&Path>,
    epochs: Option<usize>,
    finetune_epochs: Option<usize>,
    lr: Option<f64>,
    flip: Flip,
    stride: usize,
) -> Outcome {
    check_lr(lr)?;
    check_epochs("epochs", epochs)?;
    check_epochs("finetune-epochs", finetune_epochs)?;
    let base = MsdnTrainConfig::default();
    let cfg = MsdnTrainConfig {
        base_lr: lr.unwrap_or(base.base_lr),
        epochs: epochs.unwrap_or(base.epochs),
        finetune_epochs: finetune_epochs.unwrap_or(base.finetune_epochs),
        seed: cli.seed,
        flip: flip.into(),
        ..base
    };
    let mcfg = cli.preset.msdn();
    let rrn_model = match rrn {
        Some(p) => Some(RrnModel::load(p, Some(&mcfg.trunk))?),
        None => None,
    };
    let frames = load_frames(data, stride)?;
    let samples: Vec<MsdnSample> = frames
        .into_iter()
        .map(|f| MsdnSample {
            rgb: f.scene.rgb,
            gts: f.scene.gts,
            proposals: f.proposals,
        })
        .collect();
    let mut model = MsdnModel::new(mcfg, &mut Rng::derive(cli.seed, 8))?;
    let (phase1, entries) = train_msdn(&mut model, &samples, rrn_model.as_ref(), &cfg)?;
    model.save(out)?;
    if let Some(p) = phase1_out {
        phase1.save(p)?;
    }
    fs::write(log, format_msdn_log(&entries))?;
    println!(
        "trained detector for {} steps (sub-net b: {}) -> {}",
        entries.len(),
        if rrn.is_some() { "transferred" } else { "random" },
        out.display()
    );
    Ok(())
}

fn detect_cmd(cli: &Cli, data: &Path, model: &Path, out: &Path, nms_delta: f64, score_floor: f64) -> Outcome {
    usage_if(!(0.0..=1.0).contains(&nms_delta), || {
        format!("--nms-delta must be in [0, 1], got {nms_delta}")
    })?;
    usage_if(!score_floor.is_finite(), || "--score-floor must be finite".into())?;
    let m = MsdnModel::load(model, Some(&cli.preset.trunk()))?;
    let frames = load_frames(data, 1)?;
    let cfg = DetectConfig {
        nms_delta,
        score_floor,
    };
    let mut per_image = Vec::with_capacity(frames.len());
    for f in &frames {
        per_image.push((frame_id(f.id), detect(&m, &f.scene.rgb, &f.proposals, &cfg)?));
    }
    write_detections(out, &per_image)?;
    let n: usize = per_image.iter().map(|(_, d)| d.len()).sum();
    println!("{n} detections on {} frames -> {}", frames.len(), out.display());
    Ok(())
}

fn eval_cmd(data: &Path, dets: &Path, curve: Option<&Path>, subset: Subset) -> Outcome {
    check_dir(data)?;
    let manifest = read_manifest(data)?;
    let first = manifest
        .first()
        .ok_or_else(|| Failure::Data(format!("{}: dataset has no frames", data.display())))?;
    let height = read_image(&data.join("rgb").join(format!("{}.ppm", frame_id(first.id))))?.shape()[1];
    let cfg = EvalConfig::for_image_height(height);
    let mut by_id = load_detections(dets)?;
    let known: BTreeSet<String> = manifest.iter().map(|e| frame_id(e.id)).collect();
    if let Some(bad) = by_id.keys().find(|k| !known.contains(*k)) {
        return Err(Failure::Data(format!(
            "{}: image id {bad} is not in {}",
            dets.display(),
            data.display()
        )));
    }
    let mut all_dets: Vec<Vec<Detection>> = Vec::new();
    let mut gts: Vec<ImageGts> = Vec::new();
    for e in &manifest {
        let keep = match subset {
            Subset::All => true,
            Subset::Day => e.condition == Condition::Day,
            Subset::Night => e.condition == Condition::Night,
        };
        if !keep {
            continue;
        }
        let id = frame_id(e.id);
        let boxes = load_boxes(&data.join("gt").join(format!("{id}.txt")))?;
        gts.push(filter_reasonable(&boxes, &cfg));
        all_dets.push(by_id.remove(&id).unwrap_or_default());
    }
    if gts.is_empty() {
        return Err(Failure::Data("no frames in the selected subset".into()));
    }
    let result = log_avg_miss_rate(&all_dets, &gts, &cfg)?;
    if let Some(p) = curve {
        fs::write(p, format_curve(&result))?;
    }
    println!("log-avg MR: {:.4}", result.log_avg_mr);
    Ok(())
}

fn gradcheck_cmd(seeds: usize) -> Outcome {
    usage_if(seeds == 0, || "--seeds must be >= 1".into())?;
    let results = run_suite(seeds)?;
    println!("{:<14} {:>6} {:>8} {:>8} {:>12}  status", "check", "seeds", "coords", "skipped", "max rel err");
    for r in &results {
        println!(
            "{:<14} {:>6} {:>8} {:>8} {:>12.3e}  {}",
            r.name,
            r.seeds,
            r.coords,
            r.skipped,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "relative error >= {TOLERANCE:e} in: {}",
            failed.join(", ")
        )))
    }
}

fn run(cli: &Cli) -> Outcome {
    usage_if(cli.threads == 0, || "--threads must be >= 1".into())?;
    match &cli.command {
        Command::GenData {
            out,
            frames,
            night_frac,
            height,
            width,
        } => gen_data(cli, out, *frames, *night_frac, *height, *width),
        Command::TrainRrn {
            data,
            out,
            log,
            epochs,
            lr,
            flip,
            no_preprocess,
            score_threshold,
            stride,
        } => train_rrn_cmd(cli, data, out, log, *epochs, *lr, *flip, *no_preprocess, *score_threshold, *stride),
        Command::TrainMsdn {
            data,
            out,
            log,
            rrn,
            phase1_out,
            epochs,
            finetune_epochs,
            lr,
            flip,
            stride,
        } => train_msdn_cmd(
            cli,
            data,
            out,
            log,
            rrn.as_deref(),
            phase1_out.as_deref(),
            *epochs,
            *finetune_epochs,
            *lr,
            *flip,
            *stride,
        ),
        Command::Detect {
            data,
            model,
            out,
            nms_delta,
            score_floor,
        } => detect_cmd(cli, data, model, out, *nms_delta, *score_floor),
        Command::Eval {
            data,
            dets,
            curve,
            subset,
        } => eval_cmd(data, dets, curve.as_deref(), *subset),
        Command::Gradcheck { seeds } => gradcheck_cmd(*seeds),
    }
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Data(m) | Failure::Check(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
