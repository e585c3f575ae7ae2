//! Command-line interface: `convert`, `pretrain`, `finetune`, `evaluate`,
//! `detect` and `recon-eval`.
//!
//! Exit codes: 0 success (or benign verdict), 1 operational error, 2
//! malicious verdict (`detect` only). Every command resolves and validates
//! its full configuration before producing any output file, and all
//! randomness flows from the single `--seed` value.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::byteplot::{convert_file, save_png};
use crate::checkpoint::Checkpoint;
use crate::classify::{
    finetune, infer_coarse, BinaryLabel, Classifier, EncoderInit, FinetuneHyper, LabelHierarchy,
    Task,
};
use crate::error::{Error, Result};
use crate::eval::{
    confusion, macro_metrics, recon_error_eval, render_confusion_png, render_roc_png, roc_auc,
    write_confusion_csv, write_metrics_json, write_recon_csv, write_roc_csv,
};
use crate::mae::{pretrain_loop, Mae, PretrainHyper};
use crate::seed::mix_str;
use config::{
    parse_color, RunConfig, FINETUNE_BETAS, FINETUNE_DEFAULT_LR, PRETRAIN_BETAS,
    PRETRAIN_DEFAULT_LR,
};
use manifest::{load_row_image, DatasetManifest, ManifestRow, Split};

#[derive(Parser)]
#[command(
    name = "binsight",
    version,
    about = "Byteplot imaging, masked-autoencoder pretraining and malware classification for program binaries"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert binaries to section-colored byteplot PNGs
    Convert(ConvertArgs),
    /// Self-supervised masked-autoencoder pretraining
    Pretrain(PretrainArgs),
    /// Fine-tune a classification head (binary / type / family)
    Finetune(FinetuneArgs),
    /// Evaluate a classifier on a manifest split
    Evaluate(EvaluateArgs),
    /// Classify one binary file as malicious or benign
    Detect(DetectArgs),
    /// Masked-reconstruction error protocol over a manifest split
    ReconEval(ReconEvalArgs),
}

/// Configuration knobs shared by every command. Precedence: flag > config
/// file > built-in default.
#[derive(Args, Debug, Default)]
struct ConfigOverrides {
    /// Flat key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for all randomness
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    in_channels: Option<usize>,
    #[arg(long)]
    encoder_dim: Option<usize>,
    #[arg(long)]
    encoder_blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
    #[arg(long)]
    decoder_dim: Option<usize>,
    #[arg(long)]
    decoder_blocks: Option<usize>,
    #[arg(long)]
    decoder_heads: Option<usize>,
    /// Byteplot row width in bytes
    #[arg(long)]
    width: Option<usize>,
    /// Canonical square size of converted images
    #[arg(long)]
    size: Option<usize>,
    /// Color mode: gray | dex
    #[arg(long)]
    color: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    keep_ratio: Option<f64>,
    #[arg(long)]
    mask_ratio_eval: Option<f64>,
    #[arg(long)]
    n_masks_eval: Option<usize>,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        take!(seed);
        take!(image_size);
        take!(patch_size);
        take!(in_channels);
        take!(encoder_dim);
        take!(encoder_blocks);
        take!(heads);
        take!(mlp_ratio);
        take!(decoder_dim);
        take!(decoder_blocks);
        take!(decoder_heads);
        take!(batch);
        take!(epochs);
        take!(weight_decay);
        take!(keep_ratio);
        take!(mask_ratio_eval);
        take!(n_masks_eval);
        if let Some(v) = self.width {
            cfg.fixed_width = v;
        }
        if let Some(v) = self.size {
            cfg.canonical_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = Some(v);
        }
        if let Some(c) = &self.color {
            cfg.color = parse_color(c)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ConvertArgs {
    /// Input file or directory tree
    #[arg(long)]
    input: PathBuf,
    /// Output directory for PNGs and the conversion log
    #[arg(long)]
    output: PathBuf,
    /// Fail (exit 1) if any file had to be skipped
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    hierarchy: PathBuf,
    /// Output directory for checkpoints and loss.csv
    #[arg(long)]
    output: PathBuf,
    /// Continue training from an existing checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Classification granularity
    #[arg(long)]
    task: String,
    /// Initialize the encoder from a pretraining checkpoint
    #[arg(long, conflicts_with = "scratch")]
    from: Option<PathBuf>,
    /// Random encoder init (the from-scratch baseline)
    #[arg(long)]
    scratch: bool,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    hierarchy: PathBuf,
    /// Classifier checkpoint
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Manifest split to evaluate
    #[arg(long, default_value = "test")]
    split: String,
    /// Additionally collapse fine predictions to binary verdicts
    #[arg(long)]
    infer_coarse: bool,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct DetectArgs {
    /// Binary file to classify
    file: PathBuf,
    /// Classifier checkpoint (binary, type or family task)
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    hierarchy: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct ReconEvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    hierarchy: PathBuf,
    /// Pretraining (mae) checkpoint
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Class granularity for aggregation: type | family | binary
    #[arg(long, default_value = "type")]
    group_by: String,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Convert(args) => cmd_convert(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Detect(args) => cmd_detect(args),
        Command::ReconEval(args) => cmd_recon_eval(args),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// convert
// ---------------------------------------------------------------------------

fn cmd_convert(args: ConvertArgs) -> Result<i32> {
    let cfg = args.overrides.resolve()?;
    let conv = cfg.conversion_config();

    let mut inputs: Vec<PathBuf> = if args.input.is_file() {
        vec![args.input.clone()]
    } else if args.input.is_dir() {
        walkdir::WalkDir::new(&args.input)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect()
    } else {
        return Err(Error::Dataset(format!(
            "input `{}` is neither a file nor a directory",
            args.input.display()
        )));
    };
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::Dataset("no input files found".into()));
    }

    create_dir(&args.output)?;
    let root = if args.input.is_dir() {
        args.input.clone()
    } else {
        args.input.parent().unwrap_or(Path::new(".")).to_path_buf()
    };

    let started = Instant::now();
    // Outcome per file, independent of worker scheduling.
    let outcomes: Vec<(PathBuf, std::result::Result<PathBuf, String>)> = inputs
        .par_iter()
        .map(|path| {
            let rel = path.strip_prefix(&root).unwrap_or(path);
            let out_path = {
                let mut p = args.output.join(rel);
                let name = format!(
                    "{}.png",
                    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
                );
                p.set_file_name(name);
                p
            };
            let result = (|| -> Result<PathBuf> {
                if let Some(parent) = out_path.parent() {
                    create_dir(parent)?;
                }
                let img = convert_file(path, &conv)?;
                save_png(&img, &out_path)?;
                Ok(out_path.clone())
            })();
            (path.clone(), result.map_err(|e| e.to_string()))
        })
        .collect();

    let elapsed = started.elapsed().as_secs_f64();
    let mut log = String::new();
    let mut converted = 0usize;
    let mut skipped = 0usize;
    for (path, outcome) in &outcomes {
        match outcome {
            Ok(out) => {
                converted += 1;
                log.push_str(&format!("{}\tok\t{}\n", path.display(), out.display()));
            }
            Err(reason) => {
                skipped += 1;
                log.push_str(&format!("{}\tskip\t{}\n", path.display(), reason));
            }
        }
    }
    let log_path = args.output.join("conversion.log");
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;

    println!(
        "converted {converted} file(s), skipped {skipped}, {:.3}s/file average",
        elapsed / inputs.len() as f64
    );
    Ok(if skipped > 0 && args.strict { 1 } else { 0 })
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn load_split_images(
    rows: &[&ManifestRow],
    side: usize,
    in_channels: usize,
) -> Result<Vec<crate::byteplot::ByteImage>> {
    rows.iter()
        .map(|row| load_row_image(row, side, in_channels))
        .collect()
}

fn cmd_pretrain(args: PretrainArgs) -> Result<i32> {
    let cfg = args.overrides.resolve()?;
    let hierarchy = LabelHierarchy::load_csv(&args.hierarchy)?;
    let manifest = DatasetManifest::load_csv(&args.manifest, &hierarchy)?;
    let train_rows = manifest.split(Split::Train);
    if train_rows.is_empty() {
        return Err(Error::Dataset("manifest has no training rows".into()));
    }

    let (model, first_epoch) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let epoch: usize = ckpt.get_parsed("epoch")?;
            let model = Mae::from_checkpoint(&ckpt)?;
            if model.cfg != cfg.vit_config() {
                return Err(Error::Config(format!(
                    "checkpoint geometry {:?} does not match the configured geometry {:?}",
                    model.cfg,
                    cfg.vit_config()
                )));
            }
            (model, epoch + 1)
        }
        None => (
            Mae::init(&cfg.vit_config(), mix_str(cfg.seed, "mae-init"))?,
            1,
        ),
    };

    let images = load_split_images(&train_rows, cfg.image_size, cfg.in_channels)?;
    let hyper = PretrainHyper {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        lr: cfg.lr.unwrap_or(PRETRAIN_DEFAULT_LR),
        betas: PRETRAIN_BETAS,
        weight_decay: cfg.weight_decay,
        keep_ratio: cfg.keep_ratio,
    };

    create_dir(&args.output)?;
    let (_, trace) = pretrain_loop(model, &images, &hyper, cfg.seed, first_epoch, Some(&args.output))?;

    // Per-epoch mean losses on stdout; full trace appended to loss.csv.
    let mut per_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for entry in &trace {
        let slot = per_epoch.entry(entry.epoch).or_insert((0.0, 0));
        slot.0 += entry.loss;
        slot.1 += 1;
    }
    for (epoch, (total, count)) in &per_epoch {
        println!("epoch {epoch}: mean loss {:.6}", total / *count as f64);
    }

    let loss_path = args.output.join("loss.csv");
    let mut body = if loss_path.exists() && args.resume.is_some() {
        std::fs::read_to_string(&loss_path).map_err(|e| Error::io(&loss_path, e))?
    } else {
        String::from("epoch,step,loss\n")
    };
    for e in &trace {
        body.push_str(&format!("{},{},{}\n", e.epoch, e.step, e.loss));
    }
    std::fs::write(&loss_path, body).map_err(|e| Error::io(&loss_path, e))?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

fn cmd_finetune(args: FinetuneArgs) -> Result<i32> {
    let cfg = args.overrides.resolve()?;
    let task = Task::parse(&args.task)?;
    if args.from.is_none() && !args.scratch {
        return Err(Error::Config(
            "choose an encoder init: --from <checkpoint> or --scratch".into(),
        ));
    }
    let hierarchy = LabelHierarchy::load_csv(&args.hierarchy)?;
    let manifest = DatasetManifest::load_csv(&args.manifest, &hierarchy)?;
    let train_rows = manifest.split(Split::Train);
    if train_rows.is_empty() {
        return Err(Error::Dataset("manifest has no training rows".into()));
    }

    let labels = hierarchy.labels_for(task);
    let label_index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();

    let pretrained = match &args.from {
        Some(path) => {
            let model = Mae::from_checkpoint(&Checkpoint::load(path)?)?;
            if model.cfg != cfg.vit_config() {
                return Err(Error::Config(format!(
                    "checkpoint geometry {:?} does not match the configured geometry {:?}",
                    model.cfg,
                    cfg.vit_config()
                )));
            }
            Some(model)
        }
        None => None,
    };

    let images = load_split_images(&train_rows, cfg.image_size, cfg.in_channels)?;
    let dataset: Vec<(crate::byteplot::ByteImage, usize)> = images
        .into_iter()
        .zip(&train_rows)
        .map(|(img, row)| (img, label_index[row.label(task)]))
        .collect();

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch);
    let hyper = FinetuneHyper {
        max_steps: cfg.epochs * steps_per_epoch,
        batch_size: cfg.batch,
        lr: cfg.lr.unwrap_or(FINETUNE_DEFAULT_LR),
        betas: FINETUNE_BETAS,
        weight_decay: cfg.weight_decay,
        stop_at_full_accuracy: false,
    };
    let init = match &pretrained {
        Some(mae) => EncoderInit::Pretrained(mae),
        None => EncoderInit::Scratch(&cfg.vit_config()),
    };

    create_dir(&args.output)?;
    let (model, stats) = finetune(init, &dataset, task, labels, &hyper, cfg.seed)?;
    println!(
        "finetuned {} steps, final training accuracy {:.3}",
        stats.steps_run, stats.final_train_accuracy
    );
    let out_path = args.output.join(format!("model_{}.ckpt", task.as_str()));
    model.to_checkpoint(stats.steps_run).save(&out_path)?;
    println!("wrote {}", out_path.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn predictions_for_rows(
    model: &Classifier,
    rows: &[&ManifestRow],
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(rows.len());
    let mut probs = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(16) {
        let images: Vec<crate::byteplot::ByteImage> = chunk
            .iter()
            .map(|row| load_row_image(row, model.cfg.image_size, model.cfg.in_channels))
            .collect::<Result<_>>()?;
        let refs: Vec<&crate::byteplot::ByteImage> = images.iter().collect();
        for row_probs in model.predict_batch(&refs)? {
            let argmax = row_probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, _)| i)
                .expect("non-empty probability row");
            preds.push(argmax);
            probs.push(row_probs);
        }
    }
    Ok((preds, probs))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<i32> {
    let _cfg = args.overrides.resolve()?;
    let split = Split::parse(&args.split)?;
    let hierarchy = LabelHierarchy::load_csv(&args.hierarchy)?;
    let manifest = DatasetManifest::load_csv(&args.manifest, &hierarchy)?;
    let model = Classifier::from_checkpoint(&Checkpoint::load(&args.model)?)?;
    if args.infer_coarse && model.task == Task::Binary {
        return Err(Error::Config(
            "--infer-coarse needs a type or family model".into(),
        ));
    }

    let rows = manifest.split(split);
    if rows.is_empty() {
        return Err(Error::Dataset(format!("split `{}` is empty", split.as_str())));
    }
    let label_index: BTreeMap<&str, usize> = model
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let actuals: Vec<usize> = rows
        .iter()
        .map(|row| {
            label_index
                .get(row.label(model.task))
                .copied()
                .ok_or_else(|| {
                    Error::Label(format!(
                        "label `{}` unknown to this model",
                        row.label(model.task)
                    ))
                })
        })
        .collect::<Result<_>>()?;

    let (preds, probs) = predictions_for_rows(&model, &rows)?;

    create_dir(&args.output)?;
    let cm = confusion(&preds, &actuals, &model.labels)?;
    let report = macro_metrics(&cm)?;
    write_metrics_json(&report, &args.output.join("metrics.json"))?;
    write_confusion_csv(&cm, &args.output.join("confusion.csv"))?;
    render_confusion_png(&cm, &args.output.join("confusion.png"))?;
    println!(
        "{} samples: accuracy {:.4}, macro-P {:.4}, macro-R {:.4}, macro-F1 {:.4}",
        report.n_samples, report.accuracy, report.macro_precision, report.macro_recall,
        report.macro_f1_harmonic
    );

    // ROC only where a calibrated malicious probability exists.
    if model.task == Task::Binary {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let bools: Vec<bool> = rows
            .iter()
            .map(|r| r.binary_label == BinaryLabel::Malicious)
            .collect();
        let curve = roc_auc(&scores, &bools)?;
        write_roc_csv(&curve, &args.output.join("roc.csv"))?;
        render_roc_png(&curve, &args.output.join("roc.png"))?;
        println!("AUC {:.4}", curve.auc);
    }

    if args.infer_coarse {
        let binary_labels: Vec<String> = crate::classify::BINARY_LABELS
            .iter()
            .map(|s| s.to_string())
            .collect();
        let coarse_preds: Vec<usize> = preds
            .iter()
            .map(|&p| {
                infer_coarse(&model.labels[p], &hierarchy)
                    .map(|b| (b == BinaryLabel::Malicious) as usize)
            })
            .collect::<Result<_>>()?;
        let coarse_actuals: Vec<usize> = rows
            .iter()
            .map(|r| (r.binary_label == BinaryLabel::Malicious) as usize)
            .collect();
        let coarse_cm = confusion(&coarse_preds, &coarse_actuals, &binary_labels)?;
        let coarse_report = macro_metrics(&coarse_cm)?;
        write_metrics_json(&coarse_report, &args.output.join("metrics_coarse.json"))?;
        write_confusion_csv(&coarse_cm, &args.output.join("confusion_coarse.csv"))?;
        render_confusion_png(&coarse_cm, &args.output.join("confusion_coarse.png"))?;
        println!(
            "coarse (inferred binary): accuracy {:.4}, macro-F1 {:.4}",
            coarse_report.accuracy, coarse_report.macro_f1_harmonic
        );
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

fn cmd_detect(args: DetectArgs) -> Result<i32> {
    let cfg = args.overrides.resolve()?;
    let hierarchy = LabelHierarchy::load_csv(&args.hierarchy)?;
    let model = Classifier::from_checkpoint(&Checkpoint::load(&args.model)?)?;

    let convert_started = Instant::now();
    let image = convert_file(&args.file, &cfg.conversion_config())?;
    let convert_secs = convert_started.elapsed().as_secs_f64();

    let infer_started = Instant::now();
    let (verdict, p_malicious) = match model.task {
        Task::Binary => model.detect(&image)?,
        Task::Type | Task::Family => {
            let probs = model.predict(&image)?;
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, _)| i)
                .expect("non-empty probability row");
            let verdict = infer_coarse(&model.labels[argmax], &hierarchy)?;
            // Aggregate malicious mass for reporting; the verdict itself is
            // the hierarchy lookup of the argmax class.
            let p: f64 = probs
                .iter()
                .enumerate()
                .filter(|(i, _)| {
                    infer_coarse(&model.labels[*i], &hierarchy)
                        .map(|b| b == BinaryLabel::Malicious)
                        .unwrap_or(false)
                })
                .map(|(_, v)| v)
                .sum();
            (verdict, p)
        }
    };
    let infer_secs = infer_started.elapsed().as_secs_f64();

    match verdict {
        BinaryLabel::Malicious => println!("MALICIOUS p={p_malicious:.4}"),
        BinaryLabel::Benign => println!("BENIGN p={p_malicious:.4}"),
    }
    println!("convert {convert_secs:.3}s, infer {infer_secs:.3}s");
    Ok(if verdict == BinaryLabel::Malicious { 2 } else { 0 })
}

// ---------------------------------------------------------------------------
// recon-eval
// ---------------------------------------------------------------------------

fn cmd_recon_eval(args: ReconEvalArgs) -> Result<i32> {
    let cfg = args.overrides.resolve()?;
    let split = Split::parse(&args.split)?;
    let group_task = Task::parse(&args.group_by)?;
    let hierarchy = LabelHierarchy::load_csv(&args.hierarchy)?;
    let manifest = DatasetManifest::load_csv(&args.manifest, &hierarchy)?;
    let model = Mae::from_checkpoint(&Checkpoint::load(&args.model)?)?;

    let rows = manifest.split(split);
    if rows.is_empty() {
        return Err(Error::Dataset(format!("split `{}` is empty", split.as_str())));
    }

    // Group images by class label, in hierarchy label order.
    let mut by_label: BTreeMap<&str, Vec<crate::byteplot::ByteImage>> = BTreeMap::new();
    for row in &rows {
        let img = load_row_image(row, model.cfg.image_size, model.cfg.in_channels)?
            .with_source_id(row.image_path.display().to_string());
        by_label.entry(row.label(group_task)).or_default().push(img);
    }
    let groups: Vec<(String, Vec<crate::byteplot::ByteImage>)> = hierarchy
        .labels_for(group_task)
        .into_iter()
        .filter_map(|label| by_label.remove(label.as_str()).map(|imgs| (label, imgs)))
        .collect();

    let report = recon_error_eval(
        &model,
        &groups,
        cfg.n_masks_eval,
        cfg.mask_ratio_eval,
        cfg.seed,
    )?;
    create_dir(&args.output)?;
    write_recon_csv(&report, &args.output.join("recon_by_class.csv"))?;
    for c in &report.per_class {
        println!(
            "{}: mean abs error {:.6} over {} image(s)",
            c.class, c.mean_abs_error, c.n_images
        );
    }
    println!("overall {:.6}", report.overall);
    Ok(0)
}
