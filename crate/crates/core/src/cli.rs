//! Command-line front end: `train`, `segment`, `eval` and `synth`.
//!
//! Every flag may also come from a `--config` file of `key=value` lines.
//! Keys are flag names (`-` or `_`), optionally prefixed with a subcommand
//! (`train.steps=3000`) to apply to that subcommand only. Command-line flags
//! win over the file, the file wins over built-in defaults.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::dataio::{
    file_stem, list_images, load_model, load_sequence, read_image, read_key_values, save_model, synth_generate,
    trailing_index, write_pgm, write_sequence, Sequence, SequenceLayout, SynthConfig, DEFAULT_IMAGE_SIZE,
};
use crate::error::Error;
use crate::gan::{train_with_progress, TrainConfig};
use crate::inversion::{InversionConfig, LatentOptimizer, LrSchedule};
use crate::metrics::{aggregate, compute_metrics, confusion, report_csv, FrameRow};
use crate::segmentation::{segment_frame, Mask, SegConfig, ThresholdMode, DEFAULT_MIN_TAU};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PERSISTENCE: u8 = 3;
pub const EXIT_BELOW_MIN_F: u8 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "foregan",
    version,
    about = "Foreground segmentation by GAN background synthesis"
)]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a directory of background-only frames.
    Train(TrainArgs),
    /// Invert every frame of a test directory and write foreground masks.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Write the synthetic dynamic-background benchmark.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// key=value file supplying defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of background-only training frames.
    #[arg(long)]
    pub train_dir: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss CSV [default: <out>.losses.csv].
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.5)]
    pub beta1: f32,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f32,
    #[arg(long, default_value_t = 100)]
    pub latent_dim: usize,
    /// Frames are resized to this many pixels per side.
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    pub image_size: usize,
    #[arg(long, default_value_t = 128)]
    pub gen_width: usize,
    #[arg(long, default_value_t = 128)]
    pub disc_width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print losses every N steps (0 = silent).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            latent_dim: self.latent_dim,
            batch_size: self.batch_size,
            steps: self.steps,
            lr: self.lr,
            adam_beta1: self.beta1,
            adam_beta2: self.beta2,
            seed: self.seed,
            gen_width: self.gen_width,
            disc_width: self.disc_width,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdArg {
    Otsu,
    Fixed,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerArg {
    Adam,
    PlainGradient,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutArg {
    Flat,
    Wallflower,
}

impl From<LayoutArg> for SequenceLayout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Flat => SequenceLayout::FlatFrames,
            LayoutArg::Wallflower => SequenceLayout::WallflowerStyle,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SegmentArgs {
    /// key=value file supplying defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test_dir: PathBuf,
    /// Receives one mask per frame plus `inversion.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = LayoutArg::Flat)]
    pub layout: LayoutArg,
    /// Gradient steps on the latent code per restart.
    #[arg(long, default_value_t = 2000)]
    pub inv_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub inv_lr: f32,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    /// Clamp the latent code to [-1, 1] after every update.
    #[arg(long)]
    pub clip: bool,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
    pub lr_schedule: ScheduleArg,
    /// Base seed; frame i starts from seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ThresholdArg::Otsu)]
    pub threshold: ThresholdArg,
    /// Threshold in (0, 2] for `--threshold fixed`.
    #[arg(long)]
    pub tau: Option<f32>,
    /// Lower bound on the Otsu threshold.
    #[arg(long, default_value_t = DEFAULT_MIN_TAU)]
    pub min_tau: f32,
    /// Median filter window is (2r+1)².
    #[arg(long, default_value_t = 1)]
    pub median_radius: usize,
    /// Frames inverted concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Also write each generated background to `<out-dir>/backgrounds/`.
    #[arg(long)]
    pub dump_backgrounds: bool,
    /// Write a `step,loss` CSV per frame into this directory.
    #[arg(long)]
    pub trajectory_dir: Option<PathBuf>,
}

impl SegmentArgs {
    pub fn inversion_config(&self) -> InversionConfig {
        InversionConfig {
            steps: self.inv_steps,
            lr: self.inv_lr,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => LatentOptimizer::Adam,
                OptimizerArg::PlainGradient => LatentOptimizer::PlainGradient,
            },
            restarts: self.restarts,
            seed: self.seed,
            clip: self.clip,
            schedule: match self.lr_schedule {
                ScheduleArg::Constant => LrSchedule::Constant,
                ScheduleArg::Cosine => LrSchedule::Cosine,
            },
        }
    }

    pub fn seg_config(&self) -> Result<SegConfig, Error> {
        let threshold_mode = match (self.threshold, self.tau) {
            (ThresholdArg::Otsu, None) => ThresholdMode::Otsu,
            (ThresholdArg::Fixed, Some(tau)) => ThresholdMode::Fixed { tau },
            (ThresholdArg::Fixed, None) => return Err(Error::contract("--threshold fixed requires --tau")),
            (ThresholdArg::Otsu, Some(_)) => return Err(Error::contract("--tau is only valid with --threshold fixed")),
        };
        let cfg = SegConfig {
            threshold_mode,
            median_radius: self.median_radius,
            min_tau: self.min_tau,
            ..SegConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// key=value file supplying defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    pub gt: PathBuf,
    /// How prediction and ground-truth files are paired.
    #[arg(long, value_enum, default_value_t = LayoutArg::Flat)]
    pub layout: LayoutArg,
    /// CSV destination; printed to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sequence label for the CSV [default: name of the prediction directory].
    #[arg(long)]
    pub sequence: Option<String>,
    /// Exit with status 1 when the frame-mean F-measure falls below this.
    #[arg(long)]
    pub min_f: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// key=value file supplying defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Receives `train/` and `test/` (with `test/gt/`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n_background: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test: usize,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    pub size: usize,
    #[arg(long, default_value_t = 64.0)]
    pub base_luminance: f32,
    #[arg(long, default_value_t = 24.0)]
    pub wave_amplitude: f32,
    #[arg(long, default_value_t = 16.0)]
    pub wave_period_px: f32,
    #[arg(long, default_value_t = 40.0)]
    pub wave_period_frames: f32,
    /// Luminance added per frame.
    #[arg(long, default_value_t = 0.2)]
    pub illum_ramp: f32,
    #[arg(long, default_value_t = 2.0)]
    pub noise_sigma: f32,
    #[arg(long, default_value_t = 16)]
    pub object_size_px: usize,
    #[arg(long, default_value_t = 0.75)]
    pub object_contrast: f32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_background: self.n_background,
            n_test: self.n_test,
            size: self.size,
            base_luminance: self.base_luminance,
            wave_amplitude: self.wave_amplitude,
            wave_period_px: self.wave_period_px,
            wave_period_frames: self.wave_period_frames,
            illum_ramp: self.illum_ramp,
            noise_sigma: self.noise_sigma,
            object_size_px: self.object_size_px,
            object_contrast: self.object_contrast,
            seed: self.seed,
        }
    }
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn persistence(e: Error) -> Self {
        Self {
            code: EXIT_PERSISTENCE,
            message: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Format(_) => EXIT_PERSISTENCE,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

const SUBCOMMANDS: [&str; 4] = ["train", "segment", "eval", "synth"];

/// Parse `argv`, folding in the `--config` file when one is named.
pub fn parse_args<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv)?;
    let (sub, config) = match &cli.command {
        Command::Train(a) => ("train", &a.config),
        Command::Segment(a) => ("segment", &a.config),
        Command::Eval(a) => ("eval", &a.config),
        Command::Synth(a) => ("synth", &a.config),
    };
    let Some(path) = config else {
        return Ok(cli);
    };
    let pairs = read_key_values(path).map_err(|e| config_error(e.to_string()))?;
    let injected = config_args(sub, &pairs)?;
    let pos = argv
        .iter()
        .position(|a| a.to_str() == Some(sub))
        .expect("parsed subcommand appears in argv");
    let mut merged = argv[..=pos].to_vec();
    merged.extend(injected.into_iter().map(Into::into));
    merged.extend_from_slice(&argv[pos + 1..]);
    Cli::try_parse_from(merged)
}

fn config_error(msg: String) -> clap::Error {
    Cli::command().error(clap::error::ErrorKind::InvalidValue, msg)
}

/// Flags for `sub` from config pairs. Keys for other subcommands are checked
/// against those subcommands and then skipped.
fn config_args(sub: &str, pairs: &[(String, String)]) -> Result<Vec<String>, clap::Error> {
    let root = Cli::command();
    let mut out = Vec::new();
    for (key, value) in pairs {
        let key = key.replace('_', "-");
        let (scope, name) = match key.split_once('.') {
            Some((s, n)) if SUBCOMMANDS.contains(&s) => (Some(s), n.to_string()),
            Some((s, _)) => return Err(config_error(format!("config: unknown section `{s}` in key `{key}`"))),
            None => (None, key.clone()),
        };
        let check_in = scope.unwrap_or(sub);
        let cmd = root.find_subcommand(check_in).expect("known subcommand");
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(name.as_str()) && name != "config")
            .ok_or_else(|| config_error(format!("config: `{name}` is not a flag of `{check_in}`")))?;
        if scope.is_some_and(|s| s != sub) {
            continue;
        }
        if arg.get_action().takes_values() {
            out.push(format!("--{name}"));
            out.push(value.clone());
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => out.push(format!("--{name}")),
                "false" | "0" | "no" => {}
                other => {
                    return Err(config_error(format!(
                        "config: `{name}` expects true/false, got `{other}`"
                    )))
                }
            }
        }
    }
    Ok(out)
}

/// Entry point used by the binary.
pub fn main_with_args(argv: Vec<String>) -> ExitCode {
    let cli = match parse_args(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let mut written = Vec::new();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, &mut written),
        Command::Segment(a) => cmd_segment(a, &mut written),
        Command::Eval(a) => cmd_eval(a, &mut written),
        Command::Synth(a) => cmd_synth(a, &mut written),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            if !written.is_empty() {
                eprintln!("files written before the failure:");
                for p in &written {
                    eprintln!("  {}", p.display());
                }
            }
            ExitCode::from(e.code)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    written.push(path.to_path_buf());
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::from(Error::io(path, e)))
}

pub fn cmd_train(a: &TrainArgs, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let cfg = a.train_config();
    cfg.validate()?;
    if !a.train_dir.is_dir() {
        return Err(CliError::usage(format!(
            "training directory {} does not exist",
            a.train_dir.display()
        )));
    }
    let seq = load_sequence(&a.train_dir, SequenceLayout::FlatFrames, Some(a.image_size))?;
    eprintln!("training on {} frames for {} steps", seq.len(), cfg.steps);
    let log_every = a.log_every;
    let (model, history) = train_with_progress(&seq.frames, &cfg, |step, l| {
        if log_every > 0 && (step % log_every == 0 || step + 1 == cfg.steps) {
            eprintln!("step {step:>6}  d_loss {:.4}  g_loss {:.4}", l.d_loss, l.g_loss);
        }
    })?;
    save_model(&a.out, &model).map_err(CliError::persistence)?;
    written.push(a.out.clone());
    let mut csv = String::from("step,d_loss,g_loss\n");
    for (i, l) in history.iter().enumerate() {
        csv.push_str(&format!("{i},{},{}\n", l.d_loss, l.g_loss));
    }
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".losses.csv");
        PathBuf::from(p)
    });
    write_file(&loss_path, csv.as_bytes(), written)?;
    eprintln!("wrote {} and {}", a.out.display(), loss_path.display());
    Ok(())
}

struct FrameOutcome {
    mask: Mask,
    background: Vec<u8>,
    best_loss: f32,
    trajectory_csv: String,
}

pub fn cmd_segment(a: &SegmentArgs, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let icfg = a.inversion_config();
    icfg.validate()?;
    let scfg = a.seg_config()?;
    if a.jobs == 0 {
        return Err(CliError::usage("--jobs must be >= 1"));
    }
    let model = load_model(&a.model).map_err(CliError::persistence)?;
    if !a.test_dir.is_dir() {
        return Err(CliError::usage(format!(
            "test directory {} does not exist",
            a.test_dir.display()
        )));
    }
    let first = list_images(&a.test_dir)?
        .into_iter()
        .next()
        .ok_or_else(|| CliError::usage(format!("no PGM/PNG frames in {}", a.test_dir.display())))?;
    let native = read_image(&first)?;
    let seq: Sequence = load_sequence(&a.test_dir, a.layout.into(), Some(model.image_size()))?;
    if seq.frames[0].channels() != model.channels() {
        return Err(CliError::usage(format!(
            "frames have {} channels, model expects {}",
            seq.frames[0].channels(),
            model.channels()
        )));
    }

    let jobs = a.jobs.min(seq.len());
    let mut outcomes: Vec<Option<Result<FrameOutcome, Error>>> = (0..seq.len()).map(|_| None).collect();
    let segment_one = |i: usize| -> Result<FrameOutcome, Error> {
        let x = seq.frames[i].to_tensor();
        let mut cfg = icfg.clone();
        cfg.seed = icfg.seed.wrapping_add(i as u64);
        let (mask, inv) = segment_frame(&model, &x, &cfg, &scfg)?;
        let background = inv
            .background
            .data()
            .iter()
            .map(|&v| crate::dataio::denormalize(v))
            .collect();
        Ok(FrameOutcome {
            mask,
            background,
            best_loss: inv.best_loss,
            trajectory_csv: inv.trajectory_csv(),
        })
    };
    std::thread::scope(|s| {
        let chunk = seq.len().div_ceil(jobs);
        for (c, slots) in outcomes.chunks_mut(chunk).enumerate() {
            let segment_one = &segment_one;
            s.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(segment_one(c * chunk + j));
                }
            });
        }
    });

    create_dir(&a.out_dir)?;
    let bg_dir = a.out_dir.join("backgrounds");
    if a.dump_backgrounds {
        create_dir(&bg_dir)?;
    }
    if let Some(dir) = &a.trajectory_dir {
        create_dir(dir)?;
    }
    let mut csv = String::from("frame,best_loss,steps\n");
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let out = outcome.expect("every frame processed")?;
        let name = &seq.names[i];
        let mask = out.mask.resize_nearest(native.width, native.height);
        let path = a.out_dir.join(format!("{name}.pgm"));
        write_pgm(&path, mask.width(), mask.height(), &mask.to_gray())?;
        written.push(path);
        if a.dump_backgrounds {
            let size = model.image_size();
            let path = bg_dir.join(format!("{name}.pgm"));
            write_pgm(&path, size, size, &out.background[..size * size])?;
            written.push(path);
        }
        if let Some(dir) = &a.trajectory_dir {
            write_file(&dir.join(format!("{name}.csv")), out.trajectory_csv.as_bytes(), written)?;
        }
        csv.push_str(&format!("{name},{},{}\n", out.best_loss, icfg.steps));
        eprintln!(
            "{name}: best loss {:.3}, foreground {:.2}%",
            out.best_loss,
            100.0 * mask.foreground_fraction()
        );
    }
    write_file(&a.out_dir.join("inversion.csv"), csv.as_bytes(), written)?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for dir in [&a.pred, &a.gt] {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("{} is not a directory", dir.display())));
        }
    }
    let preds = list_images(&a.pred)?;
    let gts = list_images(&a.gt)?;
    let key = |p: &Path| -> Option<String> {
        match a.layout {
            LayoutArg::Flat => Some(file_stem(p)),
            LayoutArg::Wallflower => trailing_index(&file_stem(p)).map(|i| i.to_string()),
        }
    };
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for g in &gts {
        match preds.iter().find(|p| key(p).is_some() && key(p) == key(g)) {
            Some(p) => pairs.push((p.clone(), g.clone())),
            None => unmatched.push(g.clone()),
        }
    }
    if a.layout == LayoutArg::Flat {
        for p in &preds {
            if !gts.iter().any(|g| key(g) == key(p)) {
                unmatched.push(p.clone());
            }
        }
    }
    if !unmatched.is_empty() {
        let list: Vec<String> = unmatched.iter().map(|p| format!("  {}", p.display())).collect();
        return Err(CliError::usage(format!("unmatched files:\n{}", list.join("\n"))));
    }
    if pairs.is_empty() {
        return Err(CliError::usage("no prediction/ground-truth pairs to evaluate"));
    }
    let sequence = a.sequence.clone().unwrap_or_else(|| {
        a.pred
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "sequence".into())
    });
    let mut rows = Vec::new();
    for (p, g) in &pairs {
        let pred = Mask::from_raw(&read_image(p)?)?;
        let gt = Mask::from_raw(&read_image(g)?)?;
        let report = compute_metrics(confusion(&pred, &gt, None)?)?;
        rows.push(FrameRow {
            sequence: sequence.clone(),
            frame: file_stem(p),
            report,
        });
    }
    let csv = report_csv(&rows)?;
    let agg = aggregate(&rows.iter().map(|r| r.report).collect::<Vec<_>>())?;
    let summary = format!(
        "{sequence}: {} frames  F {:.4} (pooled {:.4})  precision {:.4}  recall {:.4}  accuracy {:.4}  specificity {:.4}",
        rows.len(),
        agg.mean.f_measure,
        agg.pooled.f_measure,
        agg.mean.precision,
        agg.mean.recall,
        agg.mean.accuracy,
        agg.mean.specificity
    );
    match &a.out {
        Some(path) => {
            write_file(path, csv.as_bytes(), written)?;
            println!("{summary}");
        }
        None => {
            let _ = std::io::stdout().write_all(csv.as_bytes());
            eprintln!("{summary}");
        }
    }
    match a.min_f {
        Some(min) if (agg.mean.f_measure as f64) < min => Err(CliError {
            code: EXIT_BELOW_MIN_F,
            message: format!("F-measure {:.4} is below the required {min}", agg.mean.f_measure),
        }),
        _ => Ok(()),
    }
}

pub fn cmd_synth(a: &SynthArgs, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let cfg = a.synth_config();
    let (train, test) = synth_generate(&cfg)?;
    for (dir, seq) in [(a.out.join("train"), &train), (a.out.join("test"), &test)] {
        match write_sequence(&dir, seq) {
            Ok(paths) => written.extend(paths),
            Err(e) => return Err(CliError::usage(e.to_string())),
        }
    }
    eprintln!(
        "wrote {} training and {} test frames under {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}
