//! Command-line front end over the library: dataset generation, teacher
//! training, distillation, evaluation, saliency-map export, complexity
//! accounting, and the gradient-oracle suite.
//!
//! Settings are layered: built-in defaults, then a `key = value` config
//! file (`--config`), then explicit flags. Every run that produces a
//! metrics log echoes its full resolved configuration as the log's first
//! record, so any artifact can be regenerated from the log alone.
//!
//! Exit codes: 0 success (including `--help` / `--version`), 1 usage
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{generate_dataset, load_dataset, load_split, DatasetConfig, Scene};
use crate::detector::{build_detector, count_complexity, DetectorConfig};
use crate::distill::{
    distill_train, inherit_init, prepare_teacher_kd, train_detector, EpochMetrics, KdConfig,
    TrainConfig, TrainOutcome,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_detector, mask_similarity, MapResult, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD,
};
use crate::fdcheck;
use crate::io::{export_heatmap, load_checkpoint, save_checkpoint, MetricsLog};

/// Parses `args` (including the program name) and runs the selected
/// command. Returns the process exit code instead of exiting, so tests and
/// other front ends can drive it.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::TrainTeacher(args) => train_teacher(args),
        Command::Distill(args) => run_distill(args),
        Command::Eval(args) => run_eval(args),
        Command::EmitMasks(args) => emit_masks(args),
        Command::Complexity(args) => complexity(args),
        Command::Fdcheck(args) => run_fdcheck(args),
    }
}

#[derive(Parser)]
#[command(
    name = "gkd",
    version,
    about = "Gradient-guided knowledge distillation for a toy shape detector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset (train/ and val/ splits).
    GenData(GenDataArgs),
    /// Train a detector on task loss alone and save its checkpoint.
    TrainTeacher(TrainArgs),
    /// Train a student against a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Evaluate a checkpoint's mAP@0.5 on a dataset split.
    Eval(EvalArgs),
    /// Export teacher and student saliency-map heatmaps with similarities.
    EmitMasks(EmitMasksArgs),
    /// Print parameter and FLOP counts.
    Complexity(ComplexityArgs),
    /// Run the finite-difference gradient oracle over every op and loss.
    Fdcheck(FdcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset directory to create
    #[arg(long)]
    out: PathBuf,
    /// Config file with `key = value` lines (keys: seed, train, val,
    /// image_size, min_objects, max_objects, min_size, max_size, noise,
    /// max_overlap)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training scenes [default: 500]
    #[arg(long)]
    train: Option<usize>,
    /// Validation scenes [default: 100]
    #[arg(long)]
    val: Option<usize>,
    /// Square image side in pixels [default: 64]
    #[arg(long)]
    image_size: Option<usize>,
    /// Fewest objects per scene [default: 1]
    #[arg(long)]
    min_objects: Option<usize>,
    /// Most objects per scene [default: 3]
    #[arg(long)]
    max_objects: Option<usize>,
    /// Smallest box side in pixels [default: 10]
    #[arg(long)]
    min_size: Option<f64>,
    /// Largest box side in pixels [default: 26]
    #[arg(long)]
    max_size: Option<f64>,
    /// Gaussian pixel noise sigma [default: 0.02]
    #[arg(long)]
    noise: Option<f64>,
    /// Largest allowed IoU between placed boxes [default: 0.3]
    #[arg(long)]
    max_overlap: Option<f64>,
    /// Replace an existing dataset at --out
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    /// Wide backbone (16, 32, 64)
    Teacher,
    /// Narrow backbone (8, 16, 32)
    Student,
}

impl ModelKind {
    fn config(self) -> DetectorConfig {
        match self {
            ModelKind::Teacher => DetectorConfig::teacher_toy(),
            ModelKind::Student => DetectorConfig::student_toy(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// lr 0.02 with 100 warmup steps — sized for the toy detector
    Desk,
    /// lr 0.2, no warmup — the schedule large detectors train with
    HighLr,
}

impl Preset {
    fn config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::HighLr => TrainConfig::high_lr(),
        }
    }
}

/// Flags shared by both training commands.
#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path [default: --out with a .metrics.jsonl suffix]
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Config file with `key = value` lines (keys: epochs, batch, lr,
    /// momentum, weight_decay, warmup, seed, similarity_scenes, model)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base schedule the other flags override [default: desk]
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Detector size [default: teacher here, student under distill]
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate [default: 0.02 desk preset, 0.2 high-lr preset]
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay [default: 0.0001]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Linear warmup steps, 0 disables [default: 100 desk, 0 high-lr]
    #[arg(long)]
    warmup: Option<usize>,
    /// Seed for both model init and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Teacher checkpoint to distill from
    #[arg(long)]
    teacher: PathBuf,
    /// Enable saliency-map matching [default: on]
    #[arg(long, overrides_with = "no_gkd")]
    gkd: bool,
    /// Disable saliency-map matching
    #[arg(long, overrides_with = "gkd")]
    no_gkd: bool,
    /// Enable box masks in feature imitation [default: on]
    #[arg(long, overrides_with = "no_mask")]
    mask: bool,
    /// Disable box masks (imitation weights every cell equally)
    #[arg(long, overrides_with = "mask")]
    no_mask: bool,
    /// Enable attention weighting and matching [default: on]
    #[arg(long, overrides_with = "no_mfi")]
    mfi: bool,
    /// Disable attention weighting and matching
    #[arg(long, overrides_with = "mfi")]
    no_mfi: bool,
    /// Weight of the distillation loss against the task loss [default: 1]
    #[arg(long)]
    kd_weight: Option<f64>,
    /// Weight of attention matching inside imitation [default: 1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of imitation against saliency matching [default: 0.002]
    #[arg(long)]
    beta: Option<f64>,
    /// Attention softmax temperature [default: 0.5]
    #[arg(long)]
    temperature: Option<f64>,
    /// Copy the teacher's smoothing convs and heads into the student
    /// before training [default: off]
    #[arg(long, overrides_with = "no_inherit")]
    inherit: bool,
    /// Start the student entirely from fresh initialization
    #[arg(long, overrides_with = "inherit")]
    no_inherit: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to score [default: val]
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Keep detections scoring at least this much [default: 0.05]
    #[arg(long)]
    score_threshold: Option<f64>,
    /// Suppress same-class detections overlapping a kept one beyond this
    /// IoU [default: 0.5]
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Forward-pass batch size [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Config file with `key = value` lines (keys: split,
    /// score_threshold, nms_iou, batch)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the scores to this metrics log
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EmitMasksArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint
    #[arg(long)]
    teacher: PathBuf,
    /// Student checkpoint
    #[arg(long)]
    student: PathBuf,
    /// Output directory for heatmaps and the similarity log
    #[arg(long)]
    out: PathBuf,
    /// How many scenes to render [default: 4]
    #[arg(long)]
    count: Option<usize>,
    /// Which split to draw scenes from [default: val]
    #[arg(long, value_enum)]
    split: Option<Split>,
}

#[derive(Args)]
struct ComplexityArgs {
    /// Detector config file with `key = value` lines (keys:
    /// backbone_widths, neck_channels, num_levels, num_classes, input)
    /// [default: print the teacher and student presets]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input size as WxH, overriding the config [default: 64x64]
    #[arg(long)]
    hw: Option<String>,
    /// Break the totals down per layer
    #[arg(long)]
    layers: bool,
}

#[derive(Args)]
struct FdcheckArgs {}

// ── config files ───────────────────────────────────────────────────────────

/// Parses a `key = value` file: one pair per line, `#` starts a comment,
/// blank lines ignored.
fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(path, format!("line {}: expected `key = value`", i + 1)));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_value<T>(path: &Path, key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::format(path, format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_flag(path: &Path, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::format(path, format!("{key}: expected true/false, got '{value}'"))),
    }
}

fn unknown_key(path: &Path, key: &str) -> Error {
    Error::format(path, format!("unknown key '{key}'"))
}

/// Resolves `--flag` / `--no-flag` pairs: whichever was given wins, neither
/// leaves the default in place.
fn toggle(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

fn apply<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

// ── gen-data ───────────────────────────────────────────────────────────────

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = DatasetConfig::default();
    if let Some(path) = &args.config {
        for (key, value) in read_kv_file(path)? {
            match key.as_str() {
                "seed" => cfg.seed = parse_value(path, &key, &value)?,
                "train" => cfg.train_scenes = parse_value(path, &key, &value)?,
                "val" => cfg.val_scenes = parse_value(path, &key, &value)?,
                "image_size" => cfg.scene.image_size = parse_value(path, &key, &value)?,
                "min_objects" => cfg.scene.min_objects = parse_value(path, &key, &value)?,
                "max_objects" => cfg.scene.max_objects = parse_value(path, &key, &value)?,
                "min_size" => cfg.scene.min_size = parse_value(path, &key, &value)?,
                "max_size" => cfg.scene.max_size = parse_value(path, &key, &value)?,
                "noise" => cfg.scene.noise_sigma = parse_value(path, &key, &value)?,
                "max_overlap" => cfg.scene.max_overlap = parse_value(path, &key, &value)?,
                _ => return Err(unknown_key(path, &key)),
            }
        }
    }
    apply(&mut cfg.seed, args.seed);
    apply(&mut cfg.train_scenes, args.train);
    apply(&mut cfg.val_scenes, args.val);
    apply(&mut cfg.scene.image_size, args.image_size);
    apply(&mut cfg.scene.min_objects, args.min_objects);
    apply(&mut cfg.scene.max_objects, args.max_objects);
    apply(&mut cfg.scene.min_size, args.min_size);
    apply(&mut cfg.scene.max_size, args.max_size);
    apply(&mut cfg.scene.noise_sigma, args.noise);
    apply(&mut cfg.scene.max_overlap, args.max_overlap);

    let summary = generate_dataset(&cfg, &args.out, args.overwrite)?;
    let mut log = MetricsLog::create(&args.out.join("metrics.jsonl"))?;
    log.echo_config("gen-data", &cfg)?;
    log.record(
        "summary",
        &[
            ("train_scenes", summary.train_scenes as i64),
            ("val_scenes", summary.val_scenes as i64),
            ("objects", summary.objects as i64),
            ("truncated_scenes", summary.truncated_scenes as i64),
        ],
        &[],
    )?;
    println!(
        "wrote {} train + {} val scenes ({} objects, {} truncated) to {}",
        summary.train_scenes,
        summary.val_scenes,
        summary.objects,
        summary.truncated_scenes,
        args.out.display()
    );
    Ok(())
}

// ── training commands ──────────────────────────────────────────────────────

/// Applies config file then flags on top of the preset. `foreign_keys`
/// lists file keys that belong to the calling command (the distill command
/// shares one file between training and distillation settings); anything
/// else unknown is an error.
fn resolve_train(
    args: &TrainArgs,
    default_model: ModelKind,
    foreign_keys: &[&str],
) -> Result<(TrainConfig, DetectorConfig)> {
    let mut tc = args.preset.unwrap_or(Preset::Desk).config();
    let mut model = default_model;
    if let Some(path) = &args.config {
        for (key, value) in read_kv_file(path)? {
            if foreign_keys.contains(&key.as_str()) {
                continue;
            }
            match key.as_str() {
                "epochs" => tc.epochs = parse_value(path, &key, &value)?,
                "batch" => tc.batch_size = parse_value(path, &key, &value)?,
                "lr" => tc.lr = parse_value(path, &key, &value)?,
                "momentum" => tc.momentum = parse_value(path, &key, &value)?,
                "weight_decay" => tc.weight_decay = parse_value(path, &key, &value)?,
                "warmup" => tc.warmup_steps = parse_value(path, &key, &value)?,
                "seed" => tc.seed = parse_value(path, &key, &value)?,
                "similarity_scenes" => tc.similarity_scenes = parse_value(path, &key, &value)?,
                "model" => {
                    model = match value.as_str() {
                        "teacher" => ModelKind::Teacher,
                        "student" => ModelKind::Student,
                        _ => {
                            return Err(Error::format(
                                path,
                                format!("model: expected teacher or student, got '{value}'"),
                            ))
                        }
                    }
                }
                _ => return Err(unknown_key(path, &key)),
            }
        }
    }
    apply(&mut tc.epochs, args.epochs);
    apply(&mut tc.batch_size, args.batch);
    apply(&mut tc.lr, args.lr);
    apply(&mut tc.momentum, args.momentum);
    apply(&mut tc.weight_decay, args.weight_decay);
    apply(&mut tc.warmup_steps, args.warmup);
    apply(&mut tc.seed, args.seed);
    if let Some(m) = args.model {
        model = m;
    }
    Ok((tc, model.config()))
}

fn metrics_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "run".into());
    name.push(".metrics.jsonl");
    out.with_file_name(name)
}

fn print_epoch(m: &EpochMetrics) {
    let sim = m.mask_similarity.map(|s| format!("  sim {s:.4}")).unwrap_or_default();
    println!(
        "epoch {:>3}  task {:.4}  kd {:.4}  map50 {:.4}{sim}",
        m.epoch, m.task_loss, m.kd_loss, m.val_map50
    );
}

/// Saves the checkpoint (with optimizer state) and appends one record per
/// epoch to the metrics log.
fn finish_run(args: &TrainArgs, outcome: &TrainOutcome, log: &mut MetricsLog) -> Result<()> {
    for m in &outcome.history {
        let mut floats = vec![
            ("task_loss", m.task_loss),
            ("kd_loss", m.kd_loss),
            ("val_map50", m.val_map50),
        ];
        if let Some(s) = m.mask_similarity {
            floats.push(("mask_similarity", s));
        }
        log.record("epoch", &[("epoch", m.epoch as i64)], &floats)?;
    }
    save_checkpoint(
        &args.out,
        &outcome.model,
        outcome.steps as u64,
        Some(&outcome.sgd.to_tensors(&outcome.model)),
    )?;
    if let Some(last) = outcome.history.last() {
        println!("final val map50 {:.4}; checkpoint at {}", last.val_map50, args.out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    data: String,
    detector: &'a DetectorConfig,
    train: &'a TrainConfig,
}

fn train_teacher(args: TrainArgs) -> Result<()> {
    let (tc, det) = resolve_train(&args, ModelKind::Teacher, &[])?;
    let (train_scenes, val_scenes) = load_dataset(&args.data)?;
    let metrics_path = args.metrics.clone().unwrap_or_else(|| metrics_path_for(&args.out));
    let mut log = MetricsLog::create(&metrics_path)?;
    log.echo_config(
        "train-teacher",
        &TrainEcho { data: args.data.display().to_string(), detector: &det, train: &tc },
    )?;
    let model = build_detector(&det, tc.seed)?;
    let outcome = train_detector(model, &tc, &train_scenes, &val_scenes, &mut print_epoch)?;
    finish_run(&args, &outcome, &mut log)
}

#[derive(Serialize)]
struct DistillEcho<'a> {
    data: String,
    teacher: String,
    inherit: bool,
    detector: &'a DetectorConfig,
    train: &'a TrainConfig,
    kd: &'a KdConfig,
}

fn resolve_kd(args: &DistillArgs) -> Result<(KdConfig, bool)> {
    let mut kd = KdConfig::desk();
    let mut inherit = false;
    if let Some(path) = &args.train.config {
        for (key, value) in read_kv_file(path)? {
            match key.as_str() {
                "gkd" => kd.use_gkd = parse_flag(path, &key, &value)?,
                "mask" => kd.use_mask = parse_flag(path, &key, &value)?,
                "mfi" => kd.use_mfi = parse_flag(path, &key, &value)?,
                "kd_weight" => kd.kd_weight = parse_value(path, &key, &value)?,
                "alpha" => kd.attention_weight = parse_value(path, &key, &value)?,
                "beta" => kd.bmfi_weight = parse_value(path, &key, &value)?,
                "temperature" => kd.temperature = parse_value(path, &key, &value)?,
                "inherit" => inherit = parse_flag(path, &key, &value)?,
                // Remaining keys belong to resolve_train, which validates
                // the full key set for this file.
                _ => {}
            }
        }
    }
    apply(&mut kd.use_gkd, toggle(args.gkd, args.no_gkd));
    apply(&mut kd.use_mask, toggle(args.mask, args.no_mask));
    apply(&mut kd.use_mfi, toggle(args.mfi, args.no_mfi));
    apply(&mut kd.kd_weight, args.kd_weight);
    apply(&mut kd.attention_weight, args.alpha);
    apply(&mut kd.bmfi_weight, args.beta);
    apply(&mut kd.temperature, args.temperature);
    apply(&mut inherit, toggle(args.inherit, args.no_inherit));
    Ok((kd, inherit))
}

/// Config-file keys owned by the distill command itself; the shared
/// training resolver skips these instead of rejecting them.
const DISTILL_KEYS: [&str; 8] =
    ["gkd", "mask", "mfi", "kd_weight", "alpha", "beta", "temperature", "inherit"];

fn run_distill(args: DistillArgs) -> Result<()> {
    let (kd, inherit) = resolve_kd(&args)?;
    let (tc, det) = resolve_train(&args.train, ModelKind::Student, &DISTILL_KEYS)?;

    let teacher = load_checkpoint(&args.teacher)?.into_model()?;
    let (train_scenes, val_scenes) = load_dataset(&args.train.data)?;
    let metrics_path =
        args.train.metrics.clone().unwrap_or_else(|| metrics_path_for(&args.train.out));
    let mut log = MetricsLog::create(&metrics_path)?;
    log.echo_config(
        "distill",
        &DistillEcho {
            data: args.train.data.display().to_string(),
            teacher: args.teacher.display().to_string(),
            inherit,
            detector: &det,
            train: &tc,
            kd: &kd,
        },
    )?;
    let mut student = build_detector(&det, tc.seed)?;
    if inherit {
        inherit_init(&mut student, &teacher)?;
    }
    let outcome =
        distill_train(student, Some(&teacher), &kd, &tc, &train_scenes, &val_scenes, &mut print_epoch)?;
    finish_run(&args.train, &outcome, &mut log)
}

// ── eval ───────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct EvalEcho {
    data: String,
    checkpoint: String,
    split: String,
    score_threshold: f64,
    nms_iou: f64,
    batch: usize,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let mut split = Split::Val;
    let mut score_threshold = DEFAULT_SCORE_THRESHOLD;
    let mut nms_iou = DEFAULT_NMS_IOU;
    let mut batch = 8usize;
    if let Some(path) = &args.config {
        for (key, value) in read_kv_file(path)? {
            match key.as_str() {
                "split" => {
                    split = match value.as_str() {
                        "train" => Split::Train,
                        "val" => Split::Val,
                        _ => {
                            return Err(Error::format(
                                path,
                                format!("split: expected train or val, got '{value}'"),
                            ))
                        }
                    }
                }
                "score_threshold" => score_threshold = parse_value(path, &key, &value)?,
                "nms_iou" => nms_iou = parse_value(path, &key, &value)?,
                "batch" => batch = parse_value(path, &key, &value)?,
                _ => return Err(unknown_key(path, &key)),
            }
        }
    }
    apply(&mut split, args.split);
    apply(&mut score_threshold, args.score_threshold);
    apply(&mut nms_iou, args.nms_iou);
    apply(&mut batch, args.batch);

    let split_name = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let scenes = load_split(&args.data.join(split_name))?;
    let model = load_checkpoint(&args.checkpoint)?.into_model()?;
    let result = evaluate_detector(&model, &scenes, batch, score_threshold, nms_iou)?;
    print!("{}", eval_report(&result));

    if let Some(metrics) = &args.metrics {
        let mut log = MetricsLog::create(metrics)?;
        log.echo_config(
            "eval",
            &EvalEcho {
                data: args.data.display().to_string(),
                checkpoint: args.checkpoint.display().to_string(),
                split: split_name.to_string(),
                score_threshold,
                nms_iou,
                batch,
            },
        )?;
        let mut floats = vec![("map50".to_string(), result.map50)];
        for c in &result.per_class {
            if let Some(ap) = c.ap {
                floats.push((format!("ap_class_{}", c.class_id), ap));
            }
        }
        let floats: Vec<(&str, f64)> = floats.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        log.record("map", &[("scenes", scenes.len() as i64)], &floats)?;
    }
    Ok(())
}

fn eval_report(result: &MapResult) -> String {
    let mut out = String::new();
    for c in &result.per_class {
        match c.ap {
            Some(ap) => out.push_str(&format!(
                "class {}  ap {:.4}  ({} ground-truth boxes)\n",
                c.class_id, ap, c.gt_count
            )),
            None => out.push_str(&format!("class {}  ap   --    (no ground-truth boxes)\n", c.class_id)),
        }
    }
    out.push_str(&format!("map50 {:.4}\n", result.map50));
    out
}

// ── emit-masks ─────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct EmitMasksEcho {
    data: String,
    teacher: String,
    student: String,
    split: String,
    count: usize,
}

fn emit_masks(args: EmitMasksArgs) -> Result<()> {
    let count = args.count.unwrap_or(4);
    let split_name = match args.split.unwrap_or(Split::Val) {
        Split::Train => "train",
        Split::Val => "val",
    };
    let scenes = load_split(&args.data.join(split_name))?;
    if scenes.is_empty() {
        return Err(Error::invalid("emit-masks", "the split has no scenes".to_string()));
    }
    let scenes: Vec<Scene> = scenes.into_iter().take(count).collect();

    let teacher = load_checkpoint(&args.teacher)?.into_model()?;
    let student = load_checkpoint(&args.student)?.into_model()?;
    if teacher.config.level_shapes() != student.config.level_shapes() {
        return Err(Error::shape(
            "emit-masks",
            format!(
                "teacher pyramid {:?} vs student {:?}",
                teacher.config.level_shapes(),
                student.config.level_shapes()
            ),
        ));
    }

    let teacher_kd = prepare_teacher_kd(&teacher, &scenes)?;
    let student_kd = prepare_teacher_kd(&student, &scenes)?;

    let mut log = MetricsLog::create(&args.out.join("similarity.jsonl"))?;
    log.echo_config(
        "emit-masks",
        &EmitMasksEcho {
            data: args.data.display().to_string(),
            teacher: args.teacher.display().to_string(),
            student: args.student.display().to_string(),
            split: split_name.to_string(),
            count: scenes.len(),
        },
    )?;

    let strides = teacher.config.strides();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, _) in scenes.iter().enumerate() {
        for (level, &stride) in strides.iter().enumerate() {
            let t_map = &teacher_kd.maps[i][level];
            let s_map = &student_kd.maps[i][level];
            export_heatmap(
                &args.out.join(format!("scene{i:02}_level{level}_teacher.ppm")),
                t_map,
                stride,
            )?;
            export_heatmap(
                &args.out.join(format!("scene{i:02}_level{level}_student.ppm")),
                s_map,
                stride,
            )?;
            let sim = mask_similarity(t_map, s_map)?;
            sum += sim;
            pairs += 1;
            log.record(
                "similarity",
                &[("scene", i as i64), ("level", level as i64)],
                &[("mask_similarity", sim)],
            )?;
        }
    }
    let mean = sum / pairs as f64;
    log.record("similarity_mean", &[("pairs", pairs as i64)], &[("mask_similarity", mean)])?;
    println!(
        "wrote {} heatmap pairs to {}; mean mask similarity {:.4}",
        pairs,
        args.out.display(),
        mean
    );
    Ok(())
}

// ── complexity ─────────────────────────────────────────────────────────────

fn parse_hw(path_or_flag: &str, value: &str) -> Result<(usize, usize)> {
    let err = || {
        Error::invalid(
            "complexity",
            format!("{path_or_flag}: expected WxH such as 64x64, got '{value}'"),
        )
    };
    let (w, h) = value.split_once('x').ok_or_else(err)?;
    Ok((w.trim().parse().map_err(|_| err())?, h.trim().parse().map_err(|_| err())?))
}

fn complexity(args: ComplexityArgs) -> Result<()> {
    let mut configs: Vec<(String, DetectorConfig)> = match &args.config {
        None => vec![
            ("teacher".to_string(), DetectorConfig::teacher_toy()),
            ("student".to_string(), DetectorConfig::student_toy()),
        ],
        Some(path) => {
            let mut cfg = DetectorConfig::teacher_toy();
            for (key, value) in read_kv_file(path)? {
                match key.as_str() {
                    "backbone_widths" => {
                        cfg.backbone_widths = value
                            .split(',')
                            .map(|v| parse_value(path, &key, v.trim()))
                            .collect::<Result<_>>()?;
                    }
                    "neck_channels" => cfg.neck_channels = parse_value(path, &key, &value)?,
                    "num_levels" => cfg.num_levels = parse_value(path, &key, &value)?,
                    "num_classes" => cfg.num_classes = parse_value(path, &key, &value)?,
                    "input" => {
                        let (w, h) = parse_hw(&path.display().to_string(), &value)?;
                        cfg.input_width = w;
                        cfg.input_height = h;
                    }
                    _ => return Err(unknown_key(path, &key)),
                }
            }
            vec![(path.display().to_string(), cfg)]
        }
    };
    if let Some(hw) = &args.hw {
        let (w, h) = parse_hw("--hw", hw)?;
        for (_, cfg) in &mut configs {
            cfg.input_width = w;
            cfg.input_height = h;
        }
    }
    for (_, cfg) in &configs {
        cfg.validate()?;
    }
    print!("{}", complexity_table(&configs, args.layers));
    Ok(())
}

fn complexity_table(configs: &[(String, DetectorConfig)], layers: bool) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24} {:>12} {:>16}\n", "config", "params", "flops"));
    for (name, cfg) in configs {
        if layers {
            for layer in crate::detector::layer_stack(cfg) {
                out.push_str(&format!(
                    "{:<24} {:>12} {:>16}\n",
                    format!("{name}/{}", layer.name),
                    layer.params,
                    layer.flops
                ));
            }
        }
        let total = count_complexity(cfg);
        out.push_str(&format!("{:<24} {:>12} {:>16}\n", name, total.params, total.flops));
    }
    if configs.len() == 2 {
        let a = count_complexity(&configs[0].1);
        let b = count_complexity(&configs[1].1);
        out.push_str(&format!(
            "{:<24} {:>11.1}% {:>15.1}%\n",
            format!("{}/{}", configs[1].0, configs[0].0),
            100.0 * b.params as f64 / a.params as f64,
            100.0 * b.flops as f64 / a.flops as f64
        ));
    }
    out
}

// ── fdcheck ────────────────────────────────────────────────────────────────

fn run_fdcheck(_args: FdcheckArgs) -> Result<()> {
    let reports = fdcheck::run_all()?;
    print!("{}", fdcheck_table(&reports));
    if fdcheck::all_passed(&reports) {
        Ok(())
    } else {
        let failed = reports.iter().filter(|r| !r.passed()).count();
        Err(Error::invalid("fdcheck", format!("{failed} gradient checks failed")))
    }
}

fn fdcheck_table(reports: &[fdcheck::FdReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "{:<34} max rel err {:>9.3e}  (tolerance {:.0e})  {}\n",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    let passed = reports.iter().filter(|r| r.passed()).count();
    out.push_str(&format!("{passed}/{} checks passed\n", reports.len()));
    out
}
