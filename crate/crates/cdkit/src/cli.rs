//! `cdkit` subcommands. Exit status: 0 on success, 1 for user errors
//! (bad flags, files or data), 2 for numerical failures (non-finite loss or
//! a failed gradient check).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use cdkit_core::config::ModelConfig;
use cdkit_core::data::{stack_images, synth_generate_with, SplitName, SynthConfig};
use cdkit_core::gradcheck::{self, GradcheckOptions, GradcheckRow};
use cdkit_core::metrics::{ConfusionMatrix, MetricReport};
use cdkit_core::model::{argmax_mask, ChangeFormer};
use cdkit_core::optim::AdamW;
use cdkit_core::train::{evaluate, SampleSource, Trainer};
use cdkit_core::{DType, ParamStore, Scalar};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::{self, AnyOptimizer, AnyStore, Checkpoint, CheckpointMeta};
use crate::dataset::{load_dataset, read_rgb, read_split, write_mask, write_sample, SplitFiles};
use crate::runconfig::{FileConfig, RunConfig};

/// Environment variable that supplies the output directory when `--out` is
/// not given on the command line.
pub const OUT_DIR_ENV: &str = "CDKIT_OUT_DIR";

/// Failure of the numerics rather than of the user's input.
#[derive(Debug, thiserror::Error)]
#[error("numerical failure: {0}")]
pub struct NumericalFailure(pub String);

/// Maps an error chain to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err.chain().any(|e| {
        e.is::<NumericalFailure>() || matches!(e.downcast_ref::<cdkit_core::Error>(), Some(cdkit_core::Error::NonFinite(_)))
    });
    if numerical { 2 } else { 1 }
}

#[derive(Debug, Parser)]
#[command(name = "cdkit", version, about = "Siamese transformer change detection: data, training, evaluation and inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic bi-temporal dataset in the A/B/label layout.
    Synth(SynthArgs),
    /// Train a model and save `last.ckpt` and `best.ckpt`.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and report P/R/F1/IoU/OA.
    Eval(EvalArgs),
    /// Predict a change mask for one image pair.
    Infer(InferArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of training pairs.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Number of validation pairs.
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    /// Number of test pairs.
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    /// Side length in pixels; a positive multiple of 32.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable the post-image brightness shift and noise.
    #[arg(long)]
    pub noise_free: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with a `train` split (and optionally `val`).
    #[arg(long)]
    pub data: PathBuf,
    /// TOML run configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset: tiny or base [default: tiny].
    #[arg(long)]
    pub preset: Option<String>,
    /// Training epochs [default: 200].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialization, shuffling and augmentation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial learning rate, decayed linearly to 0 [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW decoupled weight decay [default: 0.01].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Mini-batch size [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Arithmetic precision: f32 or f64 [default: f32].
    #[arg(long)]
    pub dtype: Option<String>,
    /// Turn off data augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Epochs between evaluations used for best-checkpoint selection [default: 1].
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Run directory [env: CDKIT_OUT_DIR] [default: runs/train].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint with optimizer state (e.g. last.ckpt).
    /// The remaining epochs run exactly as in an uninterrupted run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Images per forward pass.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Report directory [env: CDKIT_OUT_DIR] [default: runs/eval].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Pre-change RGB PNG.
    #[arg(long)]
    pub pre: PathBuf,
    /// Post-change RGB PNG of the same size.
    #[arg(long)]
    pub post: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output mask PNG (0 = no change, 255 = change). A relative path is
    /// placed under CDKIT_OUT_DIR when that is set.
    #[arg(long)]
    pub out: PathBuf,
    /// Also dump raw logits (`H × W × 2`, little-endian f32 after a
    /// `CDKLOGIT` + height + width header).
    #[arg(long)]
    pub logits: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Architecture for the end-to-end rows (reduced to fit an 8×8 input).
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Pass threshold for the maximum relative error.
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor in the module and model rows.
    #[arg(long, default_value_t = 6)]
    pub max_coords: usize,
    /// Test fixture: negate the backward pass of the named op.
    #[arg(long, hide = true)]
    pub inject_sign_flip: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Infer(a) => cmd_infer(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|_| ()),
    }
}

fn out_dir(flag: &Option<PathBuf>, fallback: &str) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    ensure!(a.size > 0 && a.size.is_multiple_of(32), "--size {} is not a positive multiple of 32", a.size);
    ensure!(a.count > 0, "--count must be at least 1");
    let cfg = if a.noise_free { SynthConfig::noise_free(a.size) } else { SynthConfig::new(a.size) };
    create_dir(&a.out)?;
    let total = a.count + a.val + a.test;
    let samples = synth_generate_with(total, &cfg, a.seed)?;
    let mut it = samples.into_iter().map(|(_, s)| s).enumerate();
    for (split, n) in [(SplitName::Train, a.count), (SplitName::Val, a.val), (SplitName::Test, a.test)] {
        for (i, sample) in it.by_ref().take(n) {
            write_sample(&a.out, split, &format!("synth_{i:05}"), &sample)?;
        }
        println!("{}: {n}", split.as_str());
    }
    Ok(())
}

pub fn resolve_train_config(a: &TrainArgs, data_size: (usize, usize)) -> Result<RunConfig> {
    let file = match &a.config {
        Some(p) => FileConfig::read(p)?,
        None => FileConfig::default(),
    };
    let preset = a.preset.clone().or(file.preset).unwrap_or_else(|| "tiny".into());
    let mut train = file.train;
    if let Some(v) = a.epochs {
        train.epochs = v;
    }
    if let Some(v) = a.seed {
        train.seed = v;
    }
    if let Some(v) = a.lr {
        train.initial_lr = v;
    }
    if let Some(v) = a.weight_decay {
        train.weight_decay = v;
    }
    if let Some(v) = a.batch_size {
        train.batch_size = v;
    }
    if a.no_augment {
        train.augment.enabled = false;
    }
    train.validate()?;
    let mut model = ModelConfig::preset(&preset)?.with_size(data_size.0, data_size.1);
    file.upsample.apply(&mut model);
    model.validate()?;
    let config = RunConfig {
        data: a.data.clone(),
        out: out_dir(&a.out, "runs/train"),
        dtype: a.dtype.clone().or(file.dtype).unwrap_or_else(|| "f32".into()),
        eval_every: a.eval_every.or(file.eval_every).unwrap_or(1).max(1),
        model,
        train,
    };
    config.dtype()?;
    Ok(config)
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub best_f1: Option<f64>,
    pub best_epoch: usize,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Split contents, decoded up front when small.
enum Source {
    Memory(Vec<cdkit_core::data::BiTemporalSample>),
    Disk(SplitFiles),
}

impl Source {
    fn new(split: &SplitFiles) -> Result<Self> {
        let pixels: u64 = split.samples.iter().map(|s| s.size.0 as u64 * s.size.1 as u64).sum();
        Ok(if pixels <= 1 << 26 { Source::Memory(read_split(split)?) } else { Source::Disk(split.clone()) })
    }
}

impl SampleSource for Source {
    fn len(&self) -> usize {
        match self {
            Source::Memory(v) => v.len(),
            Source::Disk(d) => d.samples.len(),
        }
    }

    fn sample(&self, index: usize) -> cdkit_core::Result<cdkit_core::data::BiTemporalSample> {
        match self {
            Source::Memory(v) => v.sample(index),
            Source::Disk(d) => d.sample(index),
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let dataset = load_dataset(&a.data)?;
    let train_files = dataset.require(SplitName::Train)?;
    let size = train_files.samples[0].size;
    if let Some(s) = train_files.samples.iter().find(|s| s.size != size) {
        bail!("training images differ in size: {} is {}×{}, expected {}×{}", s.stem, s.size.0, s.size.1, size.0, size.1);
    }
    let config = resolve_train_config(a, (size.1 as usize, size.0 as usize))?;
    config.model.check_input(config.model.height, config.model.width)?;
    create_dir(&config.out)?;
    config.dump(&config.out)?;
    let resume = a.resume.as_deref().map(checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        ck.check_compatible(&config.model)?;
        ensure!(ck.dtype() == config.dtype()?, "checkpoint is {}, run is {}", ck.dtype(), config.dtype()?);
        ensure!(ck.optimizer.is_some(), "checkpoint has no optimizer state to resume from");
    }
    let train = Source::new(train_files)?;
    let val = dataset.split(SplitName::Val).map(Source::new).transpose()?;
    match config.dtype()? {
        DType::F32 => train_with::<f32>(config, &train, val.as_ref(), resume),
        DType::F64 => train_with::<f64>(config, &train, val.as_ref(), resume),
    }
}

/// Weights, optimizer state and epoch to start from.
fn starting_point<T: Scalar + FromCheckpoint>(
    model: &ChangeFormer,
    seed: u64,
    resume: Option<Checkpoint>,
) -> Result<(ParamStore<T>, Option<(AdamW<T>, usize)>, usize)> {
    let Some(ck) = resume else {
        return Ok((model.init_weights::<T>(seed), None, 0));
    };
    let (store, opt) = T::unpack(ck.store, ck.optimizer).context("checkpoint precision does not match the run")?;
    Ok((store, Some((opt, ck.meta.step)), ck.meta.completed_epochs))
}

/// Picks the matching precision out of a loaded checkpoint.
trait FromCheckpoint: Sized {
    fn unpack(store: AnyStore, opt: Option<AnyOptimizer>) -> Option<(ParamStore<Self>, AdamW<Self>)>;
}

impl FromCheckpoint for f32 {
    fn unpack(store: AnyStore, opt: Option<AnyOptimizer>) -> Option<(ParamStore<f32>, AdamW<f32>)> {
        match (store, opt) {
            (AnyStore::F32(s), Some(AnyOptimizer::F32(o))) => Some((s, o)),
            _ => None,
        }
    }
}

impl FromCheckpoint for f64 {
    fn unpack(store: AnyStore, opt: Option<AnyOptimizer>) -> Option<(ParamStore<f64>, AdamW<f64>)> {
        match (store, opt) {
            (AnyStore::F64(s), Some(AnyOptimizer::F64(o))) => Some((s, o)),
            _ => None,
        }
    }
}

struct JsonLog {
    file: fs::File,
}

impl JsonLog {
    fn record(&mut self, value: serde_json::Value) -> Result<()> {
        let line = value.to_string();
        println!("{line}");
        writeln!(self.file, "{line}").context("writing training log")
    }
}

fn train_with<T: Scalar + FromCheckpoint>(
    config: RunConfig,
    train: &Source,
    val: Option<&Source>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    let model = ChangeFormer::new(config.model.clone())?;
    let (store, state, first_epoch) = starting_point::<T>(&model, config.train.seed, resume)?;
    ensure!(
        first_epoch <= config.train.epochs,
        "checkpoint already finished {first_epoch} epochs, more than the {} requested",
        config.train.epochs
    );
    let mut trainer = match state {
        Some((opt, step)) => Trainer::resume(&model, store, opt, config.train.clone(), train.len(), step)?,
        None => Trainer::new(&model, store, config.train.clone(), train.len())?,
    };
    let log_path = config.out.join("train.jsonl");
    let mut log = JsonLog { file: fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))? };
    let first_lr = cdkit_core::optim::lr_at(0, trainer.total_steps(), config.train.initial_lr)?;
    log.record(json!({
        "event": "start",
        "preset": config.model.preset,
        "dtype": T::DTYPE.name(),
        "train_samples": train.len(),
        "val_samples": val.map_or(0, |v| v.len()),
        "epochs": config.train.epochs,
        "batch_size": config.train.batch_size,
        "total_steps": trainer.total_steps(),
        "lr": first_lr,
        "first_epoch": first_epoch,
        "parameters": trainer.store.scalar_count(),
    }))?;

    let last = config.out.join("last.ckpt");
    let best = config.out.join("best.ckpt");
    let (select_split, select) = match val {
        Some(v) => ("val", v),
        None => ("train", train),
    };
    let mut best_f1: Option<f64> = None;
    let mut best_epoch = 0;
    if first_epoch == config.train.epochs {
        let meta = CheckpointMeta {
            completed_epochs: first_epoch,
            step: trainer.step(),
            note: "no steps taken".into(),
            ..Default::default()
        };
        checkpoint::save(&last, &config.model, &trainer.store, Some(&trainer.optimizer), &meta)?;
        checkpoint::save(&best, &config.model, &trainer.store, Some(&trainer.optimizer), &meta)?;
    }
    for epoch in first_epoch..config.train.epochs {
        let started = Instant::now();
        let summary = trainer.train_epoch(train, epoch).map_err(|e| match e {
            cdkit_core::Error::NonFinite(msg) => anyhow::Error::new(NumericalFailure(msg)),
            other => anyhow::Error::new(other),
        })?;
        let final_epoch = epoch + 1 == config.train.epochs;
        let mut record = json!({
            "event": "epoch",
            "epoch": epoch,
            "step": trainer.step(),
            "lr": summary.steps.first().map(|s| s.lr),
            "loss": summary.mean_loss,
        });
        if (epoch + 1) % config.eval_every == 0 || final_epoch {
            let cm = evaluate(&model, &mut trainer.store, select, config.train.batch_size)?;
            let report = cm.report()?;
            record[format!("{select_split}_f1")] = json!(report.f1);
            if best_f1.is_none_or(|b| report.f1 > b) {
                best_f1 = Some(report.f1);
                best_epoch = epoch;
                let meta = CheckpointMeta {
                    epoch,
                    completed_epochs: epoch + 1,
                    step: trainer.step(),
                    f1: Some(report.f1),
                    note: format!("best {select_split} F1"),
                };
                checkpoint::save(&best, &config.model, &trainer.store, Some(&trainer.optimizer), &meta)?;
            }
        }
        record["seconds"] = json!(started.elapsed().as_secs_f64());
        log.record(record)?;
        if final_epoch {
            let meta = CheckpointMeta { epoch, completed_epochs: epoch + 1, step: trainer.step(), f1: None, note: "last".into() };
            checkpoint::save(&last, &config.model, &trainer.store, Some(&trainer.optimizer), &meta)?;
        }
    }
    log.record(json!({ "event": "done", "best_epoch": best_epoch, "best_f1": best_f1, "selection_split": select_split }))?;
    Ok(TrainOutcome { config, best_f1, best_epoch, last_checkpoint: last, best_checkpoint: best })
}

fn predict_split<T: Scalar>(model: &ChangeFormer, store: &mut ParamStore<T>, split: &SplitFiles, batch: usize) -> Result<ConfusionMatrix> {
    for s in &split.samples {
        model.config.check_input(s.size.1 as usize, s.size.0 as usize).with_context(|| format!("sample {}", s.stem))?;
    }
    Ok(evaluate(model, store, split, batch)?)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricReport> {
    let split_name = SplitName::parse(&a.split).with_context(|| format!("unknown split `{}` (expected train, val or test)", a.split))?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let split = dataset.require(split_name)?;
    let model = ChangeFormer::new(ck.model.clone())?;
    let cm = match ck.store {
        AnyStore::F32(mut s) => predict_split(&model, &mut s, split, a.batch_size)?,
        AnyStore::F64(mut s) => predict_split(&model, &mut s, split, a.batch_size)?,
    };
    let report = cm.report()?;
    let out = out_dir(&a.out, "runs/eval");
    create_dir(&out)?;
    let text = format!("split: {}\nsamples: {}\n{report}", a.split, split.samples.len());
    print!("{text}");
    fs::write(out.join(format!("eval_{}.txt", a.split)), &text).context("writing report")?;
    let json = json!({ "split": a.split, "confusion": cm, "report": report });
    fs::write(out.join(format!("eval_{}.json", a.split)), serde_json::to_string_pretty(&json)?).context("writing report")?;
    Ok(report)
}

fn infer_with<T: Scalar>(
    model: &ChangeFormer,
    store: &mut ParamStore<T>,
    pre: &cdkit_core::data::Image,
    post: &cdkit_core::data::Image,
) -> Result<(Vec<u8>, Vec<f32>)> {
    let logits = model.predict(store, stack_images([pre])?, stack_images([post])?)?;
    let raw = logits.data().iter().map(|v| v.as_f64() as f32).collect();
    Ok((argmax_mask(&logits), raw))
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let pre = read_rgb(&a.pre)?;
    let post = read_rgb(&a.post)?;
    ensure!(
        (pre.height, pre.width) == (post.height, post.width),
        "pre is {}×{} but post is {}×{}",
        pre.width,
        pre.height,
        post.width,
        post.height
    );
    let ck = checkpoint::load(&a.checkpoint)?;
    ck.model.check_input(pre.height, pre.width)?;
    let model = ChangeFormer::new(ck.model.clone())?;
    let (mask, logits) = match ck.store {
        AnyStore::F32(mut s) => infer_with(&model, &mut s, &pre, &post)?,
        AnyStore::F64(mut s) => infer_with(&model, &mut s, &pre, &post)?,
    };
    if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
        return Err(NumericalFailure(format!("logit {bad} is not finite")).into());
    }
    let place = |p: &Path| match std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    };
    let out = place(&a.out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_mask(&out, pre.height, pre.width, &mask)?;
    if let Some(path) = &a.logits {
        let mut bytes = b"CDKLOGIT".to_vec();
        bytes.extend_from_slice(&(pre.height as u32).to_le_bytes());
        bytes.extend_from_slice(&(pre.width as u32).to_le_bytes());
        logits.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        fs::write(place(path), bytes).context("writing logits")?;
    }
    let changed = mask.iter().filter(|&&v| v == 1).count();
    println!("wrote {} ({}×{}, {changed} changed pixels)", out.display(), pre.width, pre.height);
    Ok(())
}

pub fn format_rows(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:<22} {:>12} {:>8} {:>7}  {}\n", "op", "max_rel_err", "checked", "kinks", "result");
    for r in rows {
        let verdict = match (&r.non_finite, r.passed()) {
            (Some(c), _) => format!("FAIL non-finite at {}[{}]", c.tensor, c.index),
            (None, true) => "ok".to_string(),
            (None, false) => match &r.worst {
                Some(c) => format!("FAIL worst at {}[{}]", c.tensor, c.index),
                None => "FAIL".to_string(),
            },
        };
        s += &format!("{:<22} {:>12.3e} {:>8} {:>7}  {verdict}\n", r.name, r.max_rel_error, r.checked, r.skipped_kinks);
    }
    s
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Vec<GradcheckRow>> {
    let sign_flip: Option<&'static str> = a.inject_sign_flip.clone().map(|s| &*Box::leak(s.into_boxed_str()));
    let opts = GradcheckOptions { epsilon: a.epsilon, tolerance: a.tolerance, max_coords: Some(a.max_coords), seed: a.seed, sign_flip };
    let rows = gradcheck::suite_for_preset(&a.preset, &opts)?;
    print!("{}", format_rows(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(NumericalFailure(format!("gradient check failed for: {}", failed.join(", "))).into());
    }
    println!("all {} rows within {:e}", rows.len(), a.tolerance);
    Ok(rows)
}
