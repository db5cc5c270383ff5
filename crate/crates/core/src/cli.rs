//! The `unoise` command line.
//!
//! Every artifact-producing subcommand writes into a staging directory
//! that is moved into place only on success, together with a
//! `config.json` holding the fully resolved arguments.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::data::{generate_synthetic, load_dataset, save_dataset, split, Dataset, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::eval::{
    default_thresholds, dice_at_visibility, format_benchmark_table, runtime_benchmark, validation_dice,
    visibility_sweep, write_csv,
};
use crate::fsutil::{write_atomic, Staging};
use crate::interpret::{export_map, grad_cam, occlusion_sensitivity, unoise_map, ImportanceMap, Method};
use crate::training::{
    noised_validation, train_unoise, train_utility, NoiseTrainConfig, Schedule, TrainOutputs, UtilityTrainConfig,
    DEFAULT_LAMBDA,
};
use crate::unet::{load_checkpoint, read_checkpoint, ModelParams, UNetConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "UNOISE_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "unoise", version, about = "Learned noise masks for interpreting segmentation networks")]
pub struct Cli {
    /// Root for outputs of commands run without `--out`.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    pub output_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic landmark dataset.
    SynthData(SynthArgs),
    /// Train the segmentation (utility) model.
    TrainUtility(UtilityArgs),
    /// Train a noise model against a frozen utility checkpoint.
    TrainNoise(NoiseArgs),
    /// Write importance maps as PGM images with JSON sidecars.
    Interpret(InterpretArgs),
    /// Run the visibility sweep.
    Evaluate(EvaluateArgs),
    /// Time the three interpretation methods.
    Benchmark(BenchArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::TrainUtility(_) => "train-utility",
            Command::TrainNoise(_) => "train-noise",
            Command::Interpret(_) => "interpret",
            Command::Evaluate(_) => "evaluate",
            Command::Benchmark(_) => "benchmark",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().image_size)]
    pub image_size: usize,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().n_distractors)]
    pub n_distractors: usize,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().landmark_size)]
    pub landmark_size: usize,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().landmark_thickness)]
    pub landmark_thickness: usize,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().landmark_intensity)]
    pub landmark_intensity: f32,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().blob_radius)]
    pub blob_radius: usize,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().blob_intensity)]
    pub blob_intensity: f32,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().offset.0, allow_negative_numbers = true)]
    pub offset_y: isize,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().offset.1, allow_negative_numbers = true)]
    pub offset_x: isize,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().background_level)]
    pub background_level: f32,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().noise_level)]
    pub noise_level: f32,
    #[arg(long, default_value_t = SyntheticTaskSpec::default().gap)]
    pub gap: usize,
}

impl SynthArgs {
    fn spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            image_size: self.image_size,
            n_distractors: self.n_distractors,
            landmark_size: self.landmark_size,
            landmark_thickness: self.landmark_thickness,
            landmark_intensity: self.landmark_intensity,
            blob_radius: self.blob_radius,
            blob_intensity: self.blob_intensity,
            offset: (self.offset_y, self.offset_x),
            background_level: self.background_level,
            noise_level: self.noise_level,
            gap: self.gap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Medium,
    Large,
}

/// Architecture flags: a preset, optionally overridden field by field.
#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Medium)]
    pub preset: Preset,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self, template: UNetConfig) -> UNetConfig {
        let preset = match self.preset {
            Preset::Small => UNetConfig::small(),
            Preset::Medium => UNetConfig::medium(),
            Preset::Large => UNetConfig::large(),
        };
        UNetConfig {
            depth: self.depth.unwrap_or(preset.depth),
            base_channels: self.base_channels.unwrap_or(preset.base_channels),
            ..template
        }
    }
}

/// Which samples form the validation split.
#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl SplitArgs {
    fn apply(&self, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
        split(dataset, 1.0 - self.val_fraction, self.split_seed)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct UtilityArgs {
    /// Dataset directory or its manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = Schedule::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = Schedule::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = Schedule::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct NoiseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub utility_ckpt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = NoiseTrainConfig::default().sigma_min)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = NoiseTrainConfig::default().sigma_max)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = NoiseTrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = NoiseTrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = NoiseTrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = NoiseTrainConfig::default().log_floor)]
    pub log_floor: f64,
    #[arg(long)]
    pub pretrain: bool,
    #[arg(long, default_value_t = NoiseTrainConfig::default().pretrain_epochs)]
    pub pretrain_epochs: usize,
}

impl NoiseArgs {
    fn train_config(&self) -> NoiseTrainConfig {
        NoiseTrainConfig {
            lambda: self.lambda,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            log_floor: self.log_floor,
            pretrain: self.pretrain,
            pretrain_epochs: self.pretrain_epochs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Unoise,
    Occlusion,
    Gradcam,
}

#[derive(Debug, Args, Serialize)]
pub struct InterpretArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub utility_ckpt: PathBuf,
    #[arg(long)]
    pub noise_ckpt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Validation-split positions of the images to explain.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub indices: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "unoise,occlusion,gradcam")]
    pub methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 15)]
    pub window: usize,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.0)]
    pub fill: f32,
    #[arg(long, default_value_t = 1)]
    pub target_class: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub utility_ckpt: PathBuf,
    #[arg(long)]
    pub noise_ckpt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Comma-separated thresholds; defaults to 0, 0.05, …, 1.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub utility_ckpt: PathBuf,
    #[arg(long)]
    pub noise_ckpt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Validation-split position of the timed image.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 15)]
    pub window: usize,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for runtime failures.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(msg) = check_inputs(&cli.command) {
        eprintln!("error: {msg}");
        return 2;
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn check_inputs(command: &Command) -> std::result::Result<(), String> {
    let mut paths: Vec<(&str, PathBuf)> = Vec::new();
    match command {
        Command::SynthData(_) => {}
        Command::TrainUtility(a) => paths.push(("--data", manifest_path(&a.data))),
        Command::TrainNoise(a) => {
            paths.push(("--data", manifest_path(&a.data)));
            paths.push(("--utility-ckpt", a.utility_ckpt.clone()));
        }
        Command::Interpret(InterpretArgs {
            data,
            utility_ckpt,
            noise_ckpt,
            ..
        })
        | Command::Evaluate(EvaluateArgs {
            data,
            utility_ckpt,
            noise_ckpt,
            ..
        })
        | Command::Benchmark(BenchArgs {
            data,
            utility_ckpt,
            noise_ckpt,
            ..
        }) => {
            paths.push(("--data", manifest_path(data)));
            paths.push(("--utility-ckpt", utility_ckpt.clone()));
            paths.push(("--noise-ckpt", noise_ckpt.clone()));
        }
    }
    for (flag, path) in paths {
        if !path.is_file() {
            return Err(format!("{flag}: cannot read {}", path.display()));
        }
    }
    Ok(())
}

fn snapshot<A: Serialize>(staging: &Staging, command: &str, args: &A, resolved: serde_json::Value) -> Result<()> {
    let value = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "resolved": resolved,
    });
    write_atomic(&staging.join("config.json"), &serde_json::to_vec_pretty(&value)?)
}

fn execute(cli: &Cli) -> Result<()> {
    let name = cli.command.name();
    let out_dir = |out: &Option<PathBuf>| out.clone().unwrap_or_else(|| cli.output_root.join(name));
    match &cli.command {
        Command::SynthData(a) => synth_data(a, &out_dir(&a.out)),
        Command::TrainUtility(a) => train_utility_cmd(a, &out_dir(&a.out)),
        Command::TrainNoise(a) => train_noise_cmd(a, &out_dir(&a.out)),
        Command::Interpret(a) => interpret_cmd(a, &out_dir(&a.out)),
        Command::Evaluate(a) => evaluate_cmd(a, &out_dir(&a.out)),
        Command::Benchmark(a) => benchmark_cmd(a, &out_dir(&a.out)),
    }
}

fn synth_data(a: &SynthArgs, out: &Path) -> Result<()> {
    let spec = a.spec();
    let dataset = generate_synthetic(&spec, a.n, a.seed)?;
    let staging = Staging::new(out)?;
    save_dataset(&dataset, staging.join("dataset"))?;
    // The dataset files go directly into the output directory.
    for entry in ["images", "masks", "manifest.json"] {
        std::fs::rename(staging.join("dataset").join(entry), staging.join(entry))?;
    }
    std::fs::remove_dir(staging.join("dataset"))?;
    snapshot(&staging, "synth-data", a, json!({ "spec": spec }))?;
    let dir = staging.publish()?;
    info!("wrote {} samples to {}", dataset.len(), dir.display());
    Ok(())
}

fn load_split(data: &Path, split_args: &SplitArgs) -> Result<(Dataset, Dataset)> {
    let dataset = load_dataset(manifest_path(data))?;
    split_args.apply(&dataset)
}

fn channels(dataset: &Dataset) -> Result<usize> {
    dataset
        .image_shape()
        .map(|(c, _, _)| c)
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))
}

fn keep_on_divergence<T>(staging: &mut Staging, result: Result<T>) -> Result<T> {
    if let Err(Error::Diverged { .. }) = &result {
        staging.keep();
    }
    result
}

fn train_utility_cmd(a: &UtilityArgs, out: &Path) -> Result<()> {
    let (train, val) = load_split(&a.data, &a.split)?;
    let classes = train.class_names.len();
    let cfg = UtilityTrainConfig {
        model: a.model.resolve(UNetConfig::segmentation(0, 0, channels(&train)?, classes)),
        schedule: Schedule {
            lr: a.lr,
            batch_size: a.batch_size,
            epochs: a.epochs,
            seed: a.seed,
        },
    };
    let mut staging = Staging::new(out)?;
    let outputs = TrainOutputs {
        checkpoint: Some(staging.join("utility.unse")),
        log: Some(staging.join("train_log.csv")),
    };
    let trained = keep_on_divergence(&mut staging, train_utility(&train, &val, &cfg, &outputs))?;
    snapshot(&staging, "train-utility", a, json!({ "train_config": cfg }))?;
    staging.publish()?;
    info!("validation dice {:.4}", trained.val_dice().unwrap_or(f64::NAN));
    Ok(())
}

fn train_noise_cmd(a: &NoiseArgs, out: &Path) -> Result<()> {
    let (train, val) = load_split(&a.data, &a.split)?;
    let utility = load_checkpoint(&a.utility_ckpt)?;
    let noise_config = a.model.resolve(UNetConfig::noise(0, 0, channels(&train)?));
    let cfg = a.train_config();
    let mut staging = Staging::new(out)?;
    let outputs = TrainOutputs {
        checkpoint: Some(staging.join("noise.unse")),
        log: Some(staging.join("noise_log.csv")),
    };
    let result = train_unoise(&train, &val, &utility, noise_config, &cfg, &outputs);
    keep_on_divergence(&mut staging, result)?;
    snapshot(
        &staging,
        "train-noise",
        a,
        json!({ "noise_model": noise_config, "train_config": cfg, "utility_digest": utility.digest() }),
    )?;
    staging.publish()?;
    Ok(())
}

fn pick(val: &Dataset, index: usize) -> Result<&crate::data::Sample> {
    val.samples.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!("index {index} out of range for {} validation images", val.len()))
    })
}

fn interpret_cmd(a: &InterpretArgs, out: &Path) -> Result<()> {
    let (_, val) = load_split(&a.data, &a.split)?;
    let utility = load_checkpoint(&a.utility_ckpt)?;
    let noise = load_checkpoint(&a.noise_ckpt)?;
    let staging = Staging::new(out)?;
    for &index in &a.indices {
        let sample = pick(&val, index)?;
        for method in &a.methods {
            let map: ImportanceMap = match method {
                MethodArg::Unoise => unoise_map(&noise, &sample.image)?.1,
                MethodArg::Occlusion => occlusion_sensitivity(&utility, &sample.image, a.window, a.stride, a.fill)?,
                MethodArg::Gradcam => grad_cam(&utility, &sample.image, a.target_class)?,
            };
            export_map(&map, staging.join(&format!("{}_{}.pgm", sample.id, map.method().name())))?;
        }
    }
    snapshot(&staging, "interpret", a, json!({}))?;
    staging.publish()?;
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, out: &Path) -> Result<()> {
    let (_, val) = load_split(&a.data, &a.split)?;
    let utility = load_checkpoint(&a.utility_ckpt)?;
    let noise = load_checkpoint(&a.noise_ckpt)?;
    let thresholds = a.thresholds.clone().unwrap_or_else(default_thresholds);
    let staging = Staging::new(out)?;
    let sweep = visibility_sweep(&utility, &noise, &val, &thresholds, a.batch_size)?;
    write_csv(&sweep, staging.join("sweep.csv"))?;
    let half = dice_at_visibility(&utility, &noise, &val, 0.5, a.batch_size)?;
    write_csv(&[half], staging.join("visibility50.csv"))?;
    // Noise scales and the validation draw come from the training run.
    let (_, meta) = read_checkpoint(&a.noise_ckpt)?;
    let cfg: NoiseTrainConfig = serde_json::from_value(meta.get("train_config").cloned().unwrap_or(json!({})))?;
    let (mean_b, noised_dice) = noised_validation(&noise, &utility, &val, &cfg)?;
    let clean_dice = validation_dice(&utility, &val, a.batch_size)?;
    let summary = Summary {
        clean_dice,
        noised_dice,
        mean_b,
    };
    write_csv(&[summary], staging.join("summary.csv"))?;
    snapshot(&staging, "evaluate", a, json!({ "thresholds": thresholds }))?;
    staging.publish()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    clean_dice: f64,
    noised_dice: f64,
    #[serde(rename = "mean_B")]
    mean_b: f64,
}

fn benchmark_cmd(a: &BenchArgs, out: &Path) -> Result<()> {
    let (_, val) = load_split(&a.data, &a.split)?;
    let utility: ModelParams<f32> = load_checkpoint(&a.utility_ckpt)?;
    let noise = load_checkpoint(&a.noise_ckpt)?;
    let x = &pick(&val, a.index)?.image;
    let mut run_unoise = || unoise_map(&noise, x).map(|_| ());
    let mut run_gradcam = || grad_cam(&utility, x, 1).map(|_| ());
    let mut run_occlusion = || occlusion_sensitivity(&utility, x, a.window, a.stride, 0.0).map(|_| ());
    let records = runtime_benchmark(
        &mut [
            (Method::Unoise.name(), &mut run_unoise),
            (Method::Gradcam.name(), &mut run_gradcam),
            (Method::Occlusion.name(), &mut run_occlusion),
        ],
        x.shape(),
        a.trials,
    )?;
    let staging = Staging::new(out)?;
    write_csv(&records, staging.join("benchmark.csv"))?;
    write_atomic(&staging.join("benchmark.txt"), format_benchmark_table(&records).as_bytes())?;
    snapshot(&staging, "benchmark", a, json!({}))?;
    staging.publish()?;
    print!("{}", format_benchmark_table(&records));
    Ok(())
}
