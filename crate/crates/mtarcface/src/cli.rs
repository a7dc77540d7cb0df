//! Command-line entry point.
//!
//! One binary drives the whole pipeline: `make-fixture` -> `augment` ->
//! `train` -> `eval-verify` / `eval-mask` -> `compare` / `plot-curves`.
//! Exit codes: 0 success, 1 usage or config error, 2 runtime error.
//! All randomness flows from explicit `--seed` flags; two runs of any
//! command with identical flags produce byte-identical outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datamodel::{
    load_manifest, parse_pairs_file, validate_twins, write_manifest_cache, FaceStore,
};
use crate::evalkit::{
    compare_models, mask_usage_accuracy, verification_accuracy, ComparisonTable, DatasetScore,
    VerificationResult,
};
use crate::fixture::{make_fixture, FixtureConfig};
use crate::maskgen::{build_masked_twin_with, JITTER_FRACTION};
use crate::model::checkpoint::load_checkpoint;
use crate::model::{ArcHeadConfig, BackboneConfig, ModelConfig};
use crate::plot::plot_curves;
use crate::sampler::DualDataset;
use crate::trainer::{self, TrainConfig};
use crate::{Error, Result};

/// Dataset paths honoring `MTARCFACE_DATA_DIR` for relative paths.
fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_relative() {
        if let Ok(root) = std::env::var("MTARCFACE_DATA_DIR") {
            if !root.is_empty() {
                return PathBuf::from(root).join(p);
            }
        }
    }
    p.to_path_buf()
}

#[derive(Parser, Debug)]
#[command(
    name = "mtarcface",
    about = "Masked-face recognition training pipeline",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)] // parsed once; TrainArgs carries every override flag
enum Command {
    /// Generate the synthetic toy dataset and its verification pairs file.
    MakeFixture(MakeFixtureArgs),
    /// Render the masked twin of a dataset.
    Augment(AugmentArgs),
    /// Train a model (full pipeline or ArcFace-only baseline).
    Train(TrainArgs),
    /// Pair-verification accuracy of a checkpoint.
    EvalVerify(EvalVerifyArgs),
    /// Mask-usage classification accuracy of a checkpoint.
    EvalMask(EvalMaskArgs),
    /// Side-by-side accuracy table for two results files.
    Compare(CompareArgs),
    /// Render training curves from a log CSV.
    PlotCurves(PlotCurvesArgs),
}

#[derive(Args, Debug)]
struct MakeFixtureArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    identities: usize,
    #[arg(long = "images-per-identity", default_value_t = 50)]
    images_per_identity: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Held-out images per identity (the pairs file references only these).
    #[arg(long, default_value_t = 10)]
    holdout: usize,
    #[arg(long = "pairs-per-fold", default_value_t = 60)]
    pairs_per_fold: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Source dataset root.
    #[arg(long = "in")]
    input: PathBuf,
    /// Destination root for the masked twin.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Expected image side; checked against the dataset when given.
    #[arg(long)]
    size: Option<usize>,
    /// Mask-position jitter as a fraction of the image side.
    #[arg(long, default_value_t = JITTER_FRACTION)]
    jitter: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// Flat `key = value` config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Original (unmasked) dataset root.
    #[arg(long)]
    original: PathBuf,
    /// Masked twin root.
    #[arg(long)]
    masked: PathBuf,
    /// Run output directory (log, checkpoints).
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,

    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    /// Comma-separated step numbers.
    #[arg(long)]
    lr_decay_steps: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    masked_probability: Option<f64>,
    #[arg(long)]
    mask_loss_weight: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
    /// Comma-separated channel widths.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    blocks_per_stage: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    arc_scale: Option<f64>,
    #[arg(long)]
    arc_margin: Option<f64>,
    /// Exclude the last k images of every identity from training.
    #[arg(long)]
    holdout_per_identity: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalVerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pairs protocol file (repeatable; one per --data).
    #[arg(long)]
    pairs: Vec<PathBuf>,
    /// Dataset root the pairs resolve against (repeatable).
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Display name per dataset (repeatable; defaults to the root's name).
    #[arg(long)]
    name: Vec<String>,
    #[arg(long, default_value = "model")]
    model_name: String,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Results CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalMaskArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Original (unmasked) dataset root; its faces carry flag 0.
    #[arg(long)]
    original: PathBuf,
    /// Masked twin root; its faces carry flag 1.
    #[arg(long)]
    masked: PathBuf,
    /// Evaluate only the last k images of every identity (0 = all).
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, default_value = "model")]
    model_name: String,
    /// Results CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Results CSV of the first model (from eval-verify).
    #[arg(long)]
    a: PathBuf,
    /// Results CSV of the second model.
    #[arg(long)]
    b: PathBuf,
    /// Write the plain-text table here (also printed to stdout).
    #[arg(long)]
    out_text: Option<PathBuf>,
    /// Write the CSV twin here.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotCurvesArgs {
    /// Training log CSV.
    #[arg(long)]
    log: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

/// The flat run configuration: optimizer schedule, sampler, and model shape.
///
/// Defaults are the desk-scale toy profile; the full-scale schedule from the
/// reference setup (300k steps, batch 512, lr 0.0015 decayed at 120k/200k/
/// 280k) stays expressible through the same keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_steps: Vec<u64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub masked_probability: f64,
    /// 1 trains the full multi-task objective; 0 is the ArcFace-only
    /// baseline (the mask head receives no gradient).
    pub mask_loss_weight: f64,
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
    pub arc_scale: f64,
    pub arc_margin: f64,
    pub holdout_per_identity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            total_steps: 2000,
            batch_size: 64,
            base_lr: 0.05,
            momentum: 0.9,
            lr_decay_factor: 0.3,
            lr_decay_steps: vec![1200, 1600],
            weight_decay: 5e-4,
            seed: 42,
            log_every: 10,
            checkpoint_every: 500,
            masked_probability: 0.5,
            mask_loss_weight: 1.0,
            input_size: 32,
            widths: vec![8, 16, 64],
            blocks_per_stage: 1,
            embedding_dim: 64,
            dropout_rate: 0.1,
            arc_scale: 16.0,
            arc_margin: 0.5,
            holdout_per_identity: 10,
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value '{t}' for key '{key}'")))
        })
        .collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::Config(format!("invalid value '{v}' for key '{k}'"));
        macro_rules! scalar {
            ($field:ident) => {
                self.$field = value.trim().parse().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "total_steps" => scalar!(total_steps),
            "batch_size" => scalar!(batch_size),
            "base_lr" => scalar!(base_lr),
            "momentum" => scalar!(momentum),
            "lr_decay_factor" => scalar!(lr_decay_factor),
            "lr_decay_steps" => self.lr_decay_steps = parse_list(value, key)?,
            "weight_decay" => scalar!(weight_decay),
            "seed" => scalar!(seed),
            "log_every" => scalar!(log_every),
            "checkpoint_every" => scalar!(checkpoint_every),
            "masked_probability" => scalar!(masked_probability),
            "mask_loss_weight" => scalar!(mask_loss_weight),
            "input_size" => scalar!(input_size),
            "widths" => self.widths = parse_list(value, key)?,
            "blocks_per_stage" => scalar!(blocks_per_stage),
            "embedding_dim" => scalar!(embedding_dim),
            "dropout_rate" => scalar!(dropout_rate),
            "arc_scale" => scalar!(arc_scale),
            "arc_margin" => scalar!(arc_margin),
            "holdout_per_identity" => scalar!(holdout_per_identity),
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parse a flat `key = value` file on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}, line {}: expected 'key = value'",
                    path.display(),
                    line_no + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            momentum: self.momentum,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_steps: self.lr_decay_steps.clone(),
            weight_decay: self.weight_decay,
            seed: self.seed,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_size: self.input_size,
                widths: self.widths.clone(),
                blocks_per_stage: self.blocks_per_stage,
                embedding_dim: self.embedding_dim,
                dropout_rate: self.dropout_rate,
            },
            arc: ArcHeadConfig {
                scale: self.arc_scale,
                margin: self.arc_margin,
            },
            num_classes,
        }
    }
}

fn merge_train_args(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    macro_rules! over {
        ($field:ident) => {
            if let Some(v) = args.$field.clone() {
                cfg.$field = v;
            }
        };
    }
    over!(total_steps);
    over!(batch_size);
    over!(base_lr);
    over!(momentum);
    over!(lr_decay_factor);
    if let Some(s) = &args.lr_decay_steps {
        cfg.lr_decay_steps = parse_list(s, "lr_decay_steps")?;
    }
    over!(weight_decay);
    over!(seed);
    over!(log_every);
    over!(checkpoint_every);
    over!(masked_probability);
    over!(mask_loss_weight);
    over!(input_size);
    if let Some(s) = &args.widths {
        cfg.widths = parse_list(s, "widths")?;
    }
    over!(blocks_per_stage);
    over!(embedding_dim);
    over!(dropout_rate);
    over!(arc_scale);
    over!(arc_margin);
    over!(holdout_per_identity);
    Ok(cfg)
}

fn cmd_make_fixture(args: &MakeFixtureArgs) -> Result<()> {
    let out = resolve_data_path(&args.out);
    let cfg = FixtureConfig {
        num_identities: args.identities,
        images_per_identity: args.images_per_identity,
        size: args.size,
        holdout_per_identity: args.holdout,
        pairs_per_fold: args.pairs_per_fold,
        folds: args.folds,
    };
    let (manifest, pairs_path) = make_fixture(&out, args.seed, &cfg)?;
    write_manifest_cache(&manifest)?;
    println!(
        "fixture: {} identities, {} images at {} ({})",
        manifest.num_identities(),
        manifest.num_images,
        out.display(),
        pairs_path.display()
    );
    Ok(())
}

fn cmd_augment(args: &AugmentArgs) -> Result<()> {
    let input = resolve_data_path(&args.input);
    let out = resolve_data_path(&args.out);
    if !(0.0..0.2).contains(&args.jitter) {
        return Err(Error::Config(format!(
            "jitter {} outside [0, 0.2)",
            args.jitter
        )));
    }
    let manifest = load_manifest(&input)?;
    if let Some(size) = args.size {
        crate::datamodel::load_face(&manifest.image_path(0, 0), Some(size))?;
    }
    let twin =
        build_masked_twin_with(&manifest, args.seed, &out, args.workers.max(1), args.jitter)?;
    validate_twins(&manifest, &twin)?;
    write_manifest_cache(&twin)?;
    println!(
        "masked twin: {} images at {}",
        twin.num_images,
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = merge_train_args(args)?;
    let original_root = resolve_data_path(&args.original);
    let masked_root = resolve_data_path(&args.masked);

    let mut original = load_manifest(&original_root)?;
    let mut masked = load_manifest(&masked_root)?;
    masked.masked_twin = true;
    validate_twins(&original, &masked)?;

    if cfg.holdout_per_identity > 0 {
        original = original.split_holdout(cfg.holdout_per_identity)?.0;
        masked = masked.split_holdout(cfg.holdout_per_identity)?.0;
    }

    let data = DualDataset::new(FaceStore::load(&original)?, FaceStore::load(&masked)?)?;
    let model_cfg = cfg.model_config(original.num_identities());

    let outcome = trainer::train_weighted(
        &cfg.train_config(),
        &model_cfg,
        cfg.masked_probability,
        cfg.mask_loss_weight,
        &data,
        &args.out,
        args.resume.as_deref(),
    )?;
    println!(
        "trained {} steps; final loss_total {:.6}; checkpoint {}",
        cfg.total_steps,
        outcome.final_breakdown.loss_total,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval_verify(args: &EvalVerifyArgs) -> Result<()> {
    if args.pairs.is_empty() || args.pairs.len() != args.data.len() {
        return Err(Error::Config(
            "--pairs and --data must be given the same number of times (at least once)".into(),
        ));
    }
    if !args.name.is_empty() && args.name.len() != args.data.len() {
        return Err(Error::Config(
            "--name must be given once per --data when present".into(),
        ));
    }
    let loaded = load_checkpoint(&args.checkpoint)?;

    let mut csv = String::from("dataset,model,accuracy,best_threshold,num_pairs\n");
    for (i, (pairs_path, data_root)) in args.pairs.iter().zip(&args.data).enumerate() {
        let root = resolve_data_path(data_root);
        let manifest = load_manifest(&root)?;
        let pairs = parse_pairs_file(&resolve_data_path(pairs_path), &manifest)?;
        let result = verification_accuracy(&pairs, &loaded.network, args.folds)?;
        let name = args.name.get(i).cloned().unwrap_or_else(|| {
            root.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned()
        });
        println!(
            "{name}: accuracy {:.4} (threshold {:.4}, {} pairs)",
            result.accuracy, result.best_threshold, result.num_pairs
        );
        csv.push_str(&crate::evalkit::result_csv_row(
            &name,
            &args.model_name,
            &result,
        ));
        csv.push('\n');
    }
    if let Some(out) = &args.out {
        fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn cmd_eval_mask(args: &EvalMaskArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let original_root = resolve_data_path(&args.original);
    let masked_root = resolve_data_path(&args.masked);
    let mut original = load_manifest(&original_root)?;
    let mut masked = load_manifest(&masked_root)?;
    validate_twins(&original, &masked)?;
    if args.holdout > 0 {
        original = original.split_holdout(args.holdout)?.1;
        masked = masked.split_holdout(args.holdout)?.1;
    }
    let store_orig = FaceStore::load(&original)?;
    let store_mask = FaceStore::load(&masked)?;

    let mut faces: Vec<(&crate::datamodel::AlignedFace, u8)> = Vec::new();
    faces.extend(store_orig.faces.iter().map(|f| (f, 0u8)));
    faces.extend(store_mask.faces.iter().map(|f| (f, 1u8)));
    let result = mask_usage_accuracy(&faces, &loaded.network)?;
    println!(
        "mask usage: accuracy {:.4} over {} faces (threshold {})",
        result.accuracy, result.num_faces, result.threshold
    );
    if let Some(out) = &args.out {
        let csv = format!(
            "model,accuracy,num_faces,threshold\n{},{},{},{}\n",
            args.model_name, result.accuracy, result.num_faces, result.threshold
        );
        fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

/// Parse a results CSV written by `eval-verify`.
fn read_results_csv(path: &Path) -> Result<(String, Vec<DatasetScore>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Eval(format!("{}: empty results file", path.display())))?;
    if header.trim() != "dataset,model,accuracy,best_threshold,num_pairs" {
        return Err(Error::Eval(format!(
            "{}: unexpected results header '{header}'",
            path.display()
        )));
    }
    let mut model = String::new();
    let mut scores = Vec::new();
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Eval(format!(
                "{}, line {}: expected 5 fields",
                path.display(),
                line_no + 2
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::Eval(format!(
                    "{}, line {}: bad {what} '{s}'",
                    path.display(),
                    line_no + 2
                ))
            })
        };
        model = fields[1].to_string();
        let accuracy = parse(fields[2], "accuracy")?;
        let best_threshold = parse(fields[3], "threshold")?;
        let num_pairs = fields[4].parse::<usize>().map_err(|_| {
            Error::Eval(format!(
                "{}, line {}: bad pair count '{}'",
                path.display(),
                line_no + 2,
                fields[4]
            ))
        })?;
        scores.push(DatasetScore {
            dataset: fields[0].to_string(),
            result: VerificationResult {
                accuracy,
                best_threshold,
                num_pairs,
                per_fold_accuracies: Vec::new(),
            },
        });
    }
    Ok((model, scores))
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let (model_a, scores_a) = read_results_csv(&args.a)?;
    let (model_b, scores_b) = read_results_csv(&args.b)?;
    let table: ComparisonTable = compare_models((&model_a, &scores_a), (&model_b, &scores_b))?;
    print!("{}", table.to_text());
    if let Some(out) = &args.out_text {
        fs::write(out, table.to_text()).map_err(|e| Error::io(out, e))?;
    }
    if let Some(out) = &args.out_csv {
        fs::write(out, table.to_csv()).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::MakeFixture(args) => cmd_make_fixture(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Train(args) => cmd_train(args),
        Command::EvalVerify(args) => cmd_eval_verify(args),
        Command::EvalMask(args) => cmd_eval_mask(args),
        Command::Compare(args) => cmd_compare(args),
        Command::PlotCurves(args) => plot_curves(&args.log, &args.out),
    }
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path too
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 1 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
