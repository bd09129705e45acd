//! Command-line interface.
//!
//! Subcommands: `train`, `attack`, `eval-rho`, `eval-curve`, `sample`,
//! `finetune`, `distance`. Every option can also come from a `key=value`
//! config file (`--config`), with command-line flags taking precedence;
//! keys the active command does not know are rejected. Exit codes: 0 on
//! success, 1 on algorithmic failure (attack failed, score unreachable,
//! undefined curve threshold), 2 on usage or config errors, 3 on malformed
//! files or I/O failures.

use std::collections::{HashMap, HashSet};
use std::sync::Mutex;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::attack::{manifool_multiclass, AttackParams};
use crate::classifier::{Architecture, ClassifierModel, LabeledDataset};
use crate::data::{derive_seed, load_idx_dataset, write_atomic};
use crate::error::Error;
use crate::geodesic::{normalized_score, sample_random_transform, GeodesicParams};
use crate::group::{Transform, TransformGroup};
use crate::image::Image;
use crate::metrics::{invariance_score, misclassification_curve};

#[derive(Parser)]
#[command(
    name = "manifool",
    version,
    about = "Minimal fooling geometric transformations for image classifiers"
)]
struct Cli {
    /// Worker threads; defaults to MANIFOOL_JOBS or the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// key=value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on an IDX dataset and save its weights.
    Train(TrainArgs),
    /// Search for the minimal fooling transformation of one image.
    Attack(AttackArgs),
    /// Mean minimal fooling score of a model over a dataset.
    EvalRho(EvalRhoArgs),
    /// Misclassification curve under random transformations.
    EvalCurve(EvalCurveArgs),
    /// Draw a random transformation with a prescribed geodesic score.
    Sample(SampleArgs),
    /// Fine-tune a model on transformed training data.
    Finetune(FinetuneArgs),
    /// Normalized geodesic score of a given transformation.
    Distance(DistanceArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// IDX image archive.
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label archive.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Optional IDX test images for a held-out accuracy column.
    #[arg(long)]
    test_images: Option<PathBuf>,
    /// Optional IDX test labels.
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// Architecture: linear, mlp, or cnn.
    #[arg(long)]
    arch: Option<String>,
    /// Hidden width of the mlp architecture.
    #[arg(long)]
    hidden: Option<usize>,
    /// Number of classes.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first N training samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Output weights file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackFlags {
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    initial_step: Option<f64>,
    /// Line-search trials per iteration.
    #[arg(long)]
    trials: Option<usize>,
    /// Line-search shrink factor.
    #[arg(long)]
    shrink: Option<f64>,
    /// Candidate target labels for the multiclass search.
    #[arg(long)]
    targets: Option<usize>,
    #[arg(long)]
    step_floor: Option<f64>,
}

#[derive(Args)]
struct GeoFlags {
    /// Tangent arc length per geodesic segment.
    #[arg(long)]
    geo_step: Option<f64>,
    /// Cap on segments per geodesic path.
    #[arg(long)]
    max_segments: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    /// Weights file of the model under attack.
    #[arg(long)]
    model: Option<PathBuf>,
    /// PGM image to fool.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Transformation group.
    #[arg(long)]
    group: Option<String>,
    /// Prefix for output artifacts: writes PREFIX.transform, PREFIX.pgm,
    /// and PREFIX.csv.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    /// Optional CSV of every accepted iteration.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    geo: GeoFlags,
}

#[derive(Args)]
struct EvalRhoArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    group: Option<String>,
    /// Evaluate only the first N images.
    #[arg(long)]
    limit: Option<usize>,
    /// Per-image CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    geo: GeoFlags,
}

#[derive(Args)]
struct EvalCurveArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    group: Option<String>,
    /// Comma-separated, strictly increasing geodesic scores.
    #[arg(long)]
    r_grid: Option<String>,
    /// Random transformations per image and grid point.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    limit: Option<usize>,
    /// Per-grid-point CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    geo: GeoFlags,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    group: Option<String>,
    /// Target normalized geodesic score.
    #[arg(long)]
    score: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the sampled transformation as one matrix line.
    #[arg(long)]
    out_transform: Option<PathBuf>,
    /// Write the transformed image as a PGM.
    #[arg(long)]
    out_image: Option<PathBuf>,
    #[command(flatten)]
    geo: GeoFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Weights file of the model to fine-tune.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Group used for fooling and for the invariance evaluation.
    #[arg(long)]
    group: Option<String>,
    /// Transform source: minimal, random, or baseline.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate; fine-tuning runs at lr * lr-scale.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first N training samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Invariance is measured on the first N samples (default 50).
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Output weights file for the fine-tuned model.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional CSV copy of the before/after report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    geo: GeoFlags,
}

#[derive(Args)]
struct DistanceArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    group: Option<String>,
    /// Transformation as nine whitespace-separated matrix entries.
    #[arg(long)]
    transform: Option<String>,
    /// File whose first line holds the transformation.
    #[arg(long)]
    transform_file: Option<PathBuf>,
    #[command(flatten)]
    geo: GeoFlags,
}

/// A failure carrying its process exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn algorithmic(message: impl Into<String>) -> Failure {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Failure {
        let code = match &err {
            Error::InvalidParams(_) | Error::DimensionMismatch(_) | Error::EmptyDataset => 2,
            Error::Format(_) | Error::Io(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Key=value settings from a config file, with usage tracking so unknown
/// keys can be rejected.
struct Settings {
    entries: HashMap<String, String>,
    used: Mutex<HashSet<String>>,
}

impl Settings {
    fn load(path: Option<&Path>) -> CliResult<Settings> {
        let mut entries = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|err| Failure {
                code: 3,
                message: format!("cannot read config {}: {err}", path.display()),
            })?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Failure::usage(format!(
                        "config line {} is not key=value: \"{line}\"",
                        lineno + 1
                    ))
                })?;
                let key = key.trim().to_string();
                if key.is_empty() {
                    return Err(Failure::usage(format!("empty key on config line {}", lineno + 1)));
                }
                entries.insert(key, value.trim().to_string());
            }
        }
        Ok(Settings {
            entries,
            used: Mutex::new(HashSet::new()),
        })
    }

    fn lookup<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        self.used.lock().unwrap().insert(key.to_string());
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Failure::usage(format!("config key {key}: cannot parse \"{raw}\""))
            }),
        }
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        match flag {
            Some(v) => {
                self.used.lock().unwrap().insert(key.to_string());
                Ok(v)
            }
            None => Ok(self.lookup(key)?.unwrap_or(default)),
        }
    }

    fn get_opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        match flag {
            Some(v) => {
                self.used.lock().unwrap().insert(key.to_string());
                Ok(Some(v))
            }
            None => self.lookup(key),
        }
    }

    fn require<T: FromStr>(&self, key: &str, flag: Option<T>) -> CliResult<T> {
        self.get_opt(key, flag)?
            .ok_or_else(|| Failure::usage(format!("missing required option --{key}")))
    }

    /// Rejects config keys the active command never consulted.
    fn finish(&self) -> CliResult<()> {
        let used = self.used.lock().unwrap();
        let mut unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .collect();
        unknown.sort();
        if let Some(first) = unknown.first() {
            return Err(Failure::usage(format!("unknown config key \"{first}\"")));
        }
        Ok(())
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            failure.code
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let jobs = match settings.get_opt("jobs", cli.jobs)? {
        Some(n) => n,
        None => match std::env::var("MANIFOOL_JOBS") {
            Ok(raw) => raw
                .parse::<usize>()
                .map_err(|_| Failure::usage(format!("bad MANIFOOL_JOBS value \"{raw}\"")))?,
            Err(_) => std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
        },
    };
    if jobs == 0 {
        return Err(Failure::usage("jobs must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|err| Failure {
            code: 2,
            message: format!("cannot build thread pool: {err}"),
        })?;
    pool.install(|| match &cli.command {
        Command::Train(args) => cmd_train(args, &settings),
        Command::Attack(args) => cmd_attack(args, &settings),
        Command::EvalRho(args) => cmd_eval_rho(args, &settings),
        Command::EvalCurve(args) => cmd_eval_curve(args, &settings),
        Command::Sample(args) => cmd_sample(args, &settings),
        Command::Finetune(args) => cmd_finetune(args, &settings),
        Command::Distance(args) => cmd_distance(args, &settings),
    })
}

fn resolve_attack(flags: &AttackFlags, settings: &Settings) -> CliResult<AttackParams> {
    let defaults = AttackParams::default();
    let params = AttackParams {
        max_iters: settings.get("max-iters", flags.max_iters, defaults.max_iters)?,
        momentum: settings.get("momentum", flags.momentum, defaults.momentum)?,
        initial_step: settings.get("initial-step", flags.initial_step, defaults.initial_step)?,
        line_search_trials: settings.get("trials", flags.trials, defaults.line_search_trials)?,
        line_search_shrink: settings.get("shrink", flags.shrink, defaults.line_search_shrink)?,
        num_targets: settings.get("targets", flags.targets, defaults.num_targets)?,
        step_floor: settings.get("step-floor", flags.step_floor, defaults.step_floor)?,
    };
    params.validate()?;
    Ok(params)
}

fn resolve_geo(flags: &GeoFlags, settings: &Settings) -> CliResult<GeodesicParams> {
    let defaults = GeodesicParams::default();
    let params = GeodesicParams {
        step: settings.get("geo-step", flags.geo_step, defaults.step)?,
        max_segments: settings.get("max-segments", flags.max_segments, defaults.max_segments)?,
    };
    params.validate()?;
    Ok(params)
}

fn resolve_group(flag: &Option<String>, settings: &Settings) -> CliResult<TransformGroup> {
    let name: String = settings.require("group", flag.clone())?;
    Ok(TransformGroup::parse(&name)?)
}

fn load_limited(
    images: &Path,
    labels: &Path,
    limit: Option<usize>,
) -> CliResult<LabeledDataset> {
    let data = load_idx_dataset(images, labels)?;
    Ok(match limit {
        Some(n) => data.take(n),
        None => data,
    })
}

fn format_opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

fn cmd_train(args: &TrainArgs, settings: &Settings) -> CliResult<()> {
    let images: PathBuf = settings.require("images", args.images.clone())?;
    let labels: PathBuf = settings.require("labels", args.labels.clone())?;
    let out: PathBuf = settings.require("out", args.out.clone())?;
    let test_images: Option<PathBuf> = settings.get_opt("test-images", args.test_images.clone())?;
    let test_labels: Option<PathBuf> = settings.get_opt("test-labels", args.test_labels.clone())?;
    let arch_name: String = settings.get("arch", args.arch.clone(), "cnn".into())?;
    let hidden = settings.get("hidden", args.hidden, 64)?;
    let classes = settings.get("classes", args.classes, 10)?;
    let epochs = settings.get("epochs", args.epochs, 5)?;
    let lr = settings.get("lr", args.lr, 0.1)?;
    let batch = settings.get("batch", args.batch, 32)?;
    let seed = settings.get("seed", args.seed, 0)?;
    let limit = settings.get_opt("limit", args.limit)?;
    settings.finish()?;

    let arch = match arch_name.as_str() {
        "linear" => Architecture::LinearSoftmax,
        "mlp" => Architecture::Mlp { hidden },
        "cnn" => Architecture::SmallCnn,
        other => return Err(Failure::usage(format!("unknown architecture \"{other}\""))),
    };
    let data = load_limited(&images, &labels, limit)?;
    if data.is_empty() {
        return Err(Failure::usage("training dataset is empty"));
    }
    let (first, _) = data.get(0);
    let model = ClassifierModel::new(arch, classes, first.width(), first.height(), seed)?;
    let run = model.train_sgd(&data, epochs, lr, batch, seed)?;
    let train_accuracy = run.model.accuracy(&data)?;
    let test_accuracy = match (&test_images, &test_labels) {
        (Some(ti), Some(tl)) => Some(run.model.accuracy(&load_idx_dataset(ti, tl)?)?),
        (None, None) => None,
        _ => {
            return Err(Failure::usage(
                "test-images and test-labels must be given together",
            ))
        }
    };
    run.model.save_weights_file(&out)?;
    println!("train_accuracy,test_accuracy");
    println!("{},{}", train_accuracy, format_opt(test_accuracy));
    Ok(())
}

fn cmd_attack(args: &AttackArgs, settings: &Settings) -> CliResult<()> {
    let model_path: PathBuf = settings.require("model", args.model.clone())?;
    let image_path: PathBuf = settings.require("image", args.image.clone())?;
    let group = resolve_group(&args.group, settings)?;
    let out_prefix: Option<PathBuf> = settings.get_opt("out-prefix", args.out_prefix.clone())?;
    let trace_path: Option<PathBuf> = settings.get_opt("trace", args.trace.clone())?;
    let attack = resolve_attack(&args.attack, settings)?;
    let geo = resolve_geo(&args.geo, settings)?;
    settings.finish()?;

    let model = ClassifierModel::load_weights_file(&model_path)?;
    let img = Image::read_pgm_file(&image_path)?;
    let result = manifool_multiclass(&img, &model, group, &attack, &geo)?;

    let row = format!(
        "{},{},{},{}",
        result.success,
        format_opt(result.geodesic_score),
        result
            .new_label
            .map(|l| l.to_string())
            .unwrap_or_default(),
        result.iterations
    );
    let csv = format!("success,d_tilde,new_label,iterations\n{row}\n");
    if let Some(prefix) = &out_prefix {
        let mut transform_path = prefix.as_os_str().to_owned();
        transform_path.push(".transform");
        write_atomic(PathBuf::from(transform_path), (result.tau_hat.to_line() + "\n").as_bytes())?;
        let mut pgm_path = prefix.as_os_str().to_owned();
        pgm_path.push(".pgm");
        let mut pgm = Vec::new();
        result.fooled_image.write_pgm(&mut pgm)?;
        write_atomic(PathBuf::from(pgm_path), &pgm)?;
        let mut csv_path = prefix.as_os_str().to_owned();
        csv_path.push(".csv");
        write_atomic(PathBuf::from(csv_path), csv.as_bytes())?;
    }
    if let Some(path) = &trace_path {
        let mut out = String::from("target,iteration,lambda,g_value,forced,coefficients\n");
        for attempt in &result.per_target {
            for record in &attempt.trace {
                let coeffs: Vec<String> =
                    record.step_coeffs.iter().map(|c| c.to_string()).collect();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    attempt.label,
                    record.iteration,
                    record.lambda,
                    record.g_value,
                    record.forced,
                    coeffs.join(" ")
                ));
            }
        }
        write_atomic(path, out.as_bytes())?;
    }
    print!("{csv}");
    if !result.success {
        return Err(Failure::algorithmic("no fooling transformation found"));
    }
    Ok(())
}

fn cmd_eval_rho(args: &EvalRhoArgs, settings: &Settings) -> CliResult<()> {
    let model_path: PathBuf = settings.require("model", args.model.clone())?;
    let images: PathBuf = settings.require("images", args.images.clone())?;
    let labels: PathBuf = settings.require("labels", args.labels.clone())?;
    let group = resolve_group(&args.group, settings)?;
    let limit = settings.get_opt("limit", args.limit)?;
    let out: Option<PathBuf> = settings.get_opt("out", args.out.clone())?;
    let attack = resolve_attack(&args.attack, settings)?;
    let geo = resolve_geo(&args.geo, settings)?;
    settings.finish()?;

    let model = ClassifierModel::load_weights_file(&model_path)?;
    let data = load_limited(&images, &labels, limit)?;
    let report = invariance_score(&data, &model, group, &attack, &geo)?;
    if let Some(path) = &out {
        write_atomic(path, report.to_csv().as_bytes())?;
    }
    println!("group,images,failures,rho_hat");
    println!(
        "{},{},{},{}",
        group.name(),
        report.per_image.len(),
        report.failure_count,
        report.rho_hat
    );
    Ok(())
}

fn cmd_eval_curve(args: &EvalCurveArgs, settings: &Settings) -> CliResult<()> {
    let model_path: PathBuf = settings.require("model", args.model.clone())?;
    let images: PathBuf = settings.require("images", args.images.clone())?;
    let labels: PathBuf = settings.require("labels", args.labels.clone())?;
    let group = resolve_group(&args.group, settings)?;
    let grid_text: String = settings.require("r-grid", args.r_grid.clone())?;
    let reps = settings.get("reps", args.reps, 10)?;
    let seed = settings.get("seed", args.seed, 0)?;
    let limit = settings.get_opt("limit", args.limit)?;
    let out: Option<PathBuf> = settings.get_opt("out", args.out.clone())?;
    let geo = resolve_geo(&args.geo, settings)?;
    settings.finish()?;

    let r_grid: Vec<f64> = grid_text
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Failure::usage(format!("bad grid score \"{tok}\"")))
        })
        .collect::<CliResult<_>>()?;
    let model = ClassifierModel::load_weights_file(&model_path)?;
    let data = load_limited(&images, &labels, limit)?;
    let curve = misclassification_curve(&data, &model, group, &r_grid, reps, seed, &geo)?;
    if let Some(path) = &out {
        write_atomic(path, curve.to_csv().as_bytes())?;
    }
    println!("group,r_hat");
    println!("{},{}", group.name(), format_opt(curve.r_hat));
    if curve.r_hat.is_none() {
        return Err(Failure::algorithmic(
            "misclassification rate never reaches one half",
        ));
    }
    Ok(())
}

fn cmd_sample(args: &SampleArgs, settings: &Settings) -> CliResult<()> {
    let image_path: PathBuf = settings.require("image", args.image.clone())?;
    let group = resolve_group(&args.group, settings)?;
    let score: f64 = settings.require("score", args.score)?;
    let seed = settings.get("seed", args.seed, 0)?;
    let out_transform: Option<PathBuf> =
        settings.get_opt("out-transform", args.out_transform.clone())?;
    let out_image: Option<PathBuf> = settings.get_opt("out-image", args.out_image.clone())?;
    let geo = resolve_geo(&args.geo, settings)?;
    settings.finish()?;

    let img = Image::read_pgm_file(&image_path)?;
    let t = sample_random_transform(&img, group, score, seed, &geo)?;
    let achieved = normalized_score(&img, &t, group, &geo)?;
    if let Some(path) = &out_transform {
        write_atomic(path, (t.to_line() + "\n").as_bytes())?;
    }
    if let Some(path) = &out_image {
        let mut pgm = Vec::new();
        img.warp(&t)?.write_pgm(&mut pgm)?;
        write_atomic(path, &pgm)?;
    }
    println!("target_score,achieved_score");
    println!("{},{}", score, achieved);
    Ok(())
}

fn cmd_distance(args: &DistanceArgs, settings: &Settings) -> CliResult<()> {
    let image_path: PathBuf = settings.require("image", args.image.clone())?;
    let group = resolve_group(&args.group, settings)?;
    let inline: Option<String> = settings.get_opt("transform", args.transform.clone())?;
    let from_file: Option<PathBuf> =
        settings.get_opt("transform-file", args.transform_file.clone())?;
    let geo = resolve_geo(&args.geo, settings)?;
    settings.finish()?;

    let line = match (inline, from_file) {
        (Some(text), None) => text,
        (None, Some(path)) => {
            let content = std::fs::read_to_string(&path).map_err(|err| Failure {
                code: 3,
                message: format!("cannot read {}: {err}", path.display()),
            })?;
            content
                .lines()
                .find(|l| !l.trim().is_empty())
                .ok_or_else(|| Failure {
                    code: 3,
                    message: format!("{} holds no transform line", path.display()),
                })?
                .to_string()
        }
        _ => {
            return Err(Failure::usage(
                "exactly one of --transform and --transform-file is required",
            ))
        }
    };
    let t = Transform::from_line(&line)?;
    let img = Image::read_pgm_file(&image_path)?;
    let score = normalized_score(&img, &t, group, &geo)?;
    println!("d_tilde");
    println!("{score}");
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs, settings: &Settings) -> CliResult<()> {
    let model_path: PathBuf = settings.require("model", args.model.clone())?;
    let images: PathBuf = settings.require("images", args.images.clone())?;
    let labels: PathBuf = settings.require("labels", args.labels.clone())?;
    let out: PathBuf = settings.require("out", args.out.clone())?;
    let group = match settings.get_opt::<String>("group", args.group.clone())? {
        Some(name) => TransformGroup::parse(&name)?,
        None => TransformGroup::Affine,
    };
    let mode: String = settings.get("mode", args.mode.clone(), "minimal".into())?;
    let epochs = settings.get("epochs", args.epochs, 1)?;
    let lr = settings.get("lr", args.lr, 0.1)?;
    let lr_scale = settings.get("lr-scale", args.lr_scale, 0.5)?;
    let batch = settings.get("batch", args.batch, 32)?;
    let seed = settings.get("seed", args.seed, 0)?;
    let limit = settings.get_opt("limit", args.limit)?;
    let eval_limit = settings.get("eval-limit", args.eval_limit, 50)?;
    let report_path: Option<PathBuf> = settings.get_opt("report", args.report.clone())?;
    let attack = resolve_attack(&args.attack, settings)?;
    let geo = resolve_geo(&args.geo, settings)?;
    settings.finish()?;

    if !matches!(mode.as_str(), "minimal" | "random" | "baseline") {
        return Err(Failure::usage(format!(
            "unknown mode \"{mode}\", expected minimal, random, or baseline"
        )));
    }
    let model = ClassifierModel::load_weights_file(&model_path)?;
    let data = load_limited(&images, &labels, limit)?;
    if data.is_empty() {
        return Err(Failure::usage("training dataset is empty"));
    }
    let eval_set = data.take(eval_limit);

    let before = invariance_score(&eval_set, &model, group, &attack, &geo)?;

    let transforms = match mode.as_str() {
        "baseline" => vec![None; data.len()],
        _ => {
            let minimal = fool_transforms(&data, &model, group, &attack, &geo)?;
            if mode == "minimal" {
                minimal.into_iter().map(|m| m.map(|(t, _)| t)).collect()
            } else {
                let mut scores: Vec<f64> = minimal
                    .iter()
                    .filter_map(|m| m.as_ref().map(|(_, s)| *s))
                    .filter(|s| *s > 0.0)
                    .collect();
                if scores.is_empty() {
                    return Err(Failure::algorithmic(
                        "no fooling scores to take the median of",
                    ));
                }
                scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = if scores.len() % 2 == 1 {
                    scores[scores.len() / 2]
                } else {
                    0.5 * (scores[scores.len() / 2 - 1] + scores[scores.len() / 2])
                };
                random_transforms(&data, group, median, seed, &geo)?
            }
        }
    };
    // Fine-tune on the originals plus a transformed copy of each image;
    // the clean half anchors the small models to the untransformed
    // distribution while the warped half pushes the boundary outward.
    let mut ft_images = data.images().to_vec();
    ft_images.extend(data.images().iter().cloned());
    let mut ft_labels = data.labels().to_vec();
    ft_labels.extend(data.labels().iter().cloned());
    let mut ft_transforms: Vec<Option<Transform>> = vec![None; data.len()];
    ft_transforms.extend(transforms);
    let ft_data = LabeledDataset::new(ft_images, ft_labels)?;
    let tuned = model
        .finetune_adversarial(&ft_data, &ft_transforms, epochs, lr, lr_scale, batch, seed)?
        .model;
    let after = invariance_score(&eval_set, &tuned, group, &attack, &geo)?;
    tuned.save_weights_file(&out)?;

    let mut csv = String::from("mode,phase,images,failures,rho_hat\n");
    csv.push_str(&format!(
        "{},before,{},{},{}\n",
        mode,
        before.per_image.len(),
        before.failure_count,
        before.rho_hat
    ));
    csv.push_str(&format!(
        "{},after,{},{},{}\n",
        mode,
        after.per_image.len(),
        after.failure_count,
        after.rho_hat
    ));
    if let Some(path) = &report_path {
        write_atomic(path, csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

/// Minimal fooling transform and score per correctly classified image;
/// `None` for misclassified images and failed searches.
fn fool_transforms(
    data: &LabeledDataset,
    model: &ClassifierModel,
    group: TransformGroup,
    attack: &AttackParams,
    geo: &GeodesicParams,
) -> CliResult<Vec<Option<(Transform, f64)>>> {
    use rayon::prelude::*;
    let results: Vec<Option<(Transform, f64)>> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Option<(Transform, f64)>, Error> {
            let (img, label) = data.get(i);
            if model.predict(img)? != label {
                return Ok(None);
            }
            let result = manifool_multiclass(img, model, group, attack, geo)?;
            Ok(if result.success {
                Some((result.tau_hat, result.geodesic_score.unwrap_or(0.0)))
            } else {
                None
            })
        })
        .collect::<Result<_, Error>>()?;
    Ok(results)
}

/// Random transform at the given score per image; `None` where the score
/// cannot be reached.
fn random_transforms(
    data: &LabeledDataset,
    group: TransformGroup,
    score: f64,
    seed: u64,
    geo: &GeodesicParams,
) -> CliResult<Vec<Option<Transform>>> {
    use rayon::prelude::*;
    let results: Vec<Option<Transform>> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Option<Transform>, Error> {
            let sample_seed = derive_seed(seed, &[0x7261_6e64, i as u64]);
            match sample_random_transform(&data.images()[i], group, score, sample_seed, geo) {
                Ok(t) => Ok(Some(t)),
                Err(Error::BracketFailure(_)) | Err(Error::ZeroImage) => Ok(None),
                Err(other) => Err(other),
            }
        })
        .collect::<Result<_, Error>>()?;
    Ok(results)
}
