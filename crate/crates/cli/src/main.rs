use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use specmask::data::{
    corrupt_dataset, load_cifar10, read_batch_file, write_corruption_dump, CorruptionKind, CorruptionSpec, Dataset,
};
use specmask::harness::eval::{eval_csv, EvalOptions, Severity, EVAL_HEADER};
use specmask::harness::run::{run_eval, run_train, TrainJob};
use specmask::harness::{load_checkpoint, report_masks, TrainConfig};
use specmask::{Error, Real, Result};

/// Train and evaluate CNNs with learnable binarized spectral masks.
#[derive(Debug, Parser)]
#[command(name = "specmask", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics, a checkpoint and optional plots.
    Train(TrainArgs),
    /// Evaluate a checkpoint on clean and corrupted test images (CSV).
    Eval(EvalArgs),
    /// Print the fraction of masked frequencies per conv layer.
    ReportMasks(ReportArgs),
    /// Render corrupted samples as PNG, or dump corrupted test sets.
    CorruptPreview(PreviewArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// key = value file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CIFAR-10 binary directory.
    #[arg(long, required = true)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// lenet | resnet
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Comma-separated stage widths, e.g. 16,32,64.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// [default: 1e-4]
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    /// on | off [default: on]
    #[arg(long)]
    mask: Option<String>,
    /// [default: 0.8]
    #[arg(long)]
    mask_init_mean: Option<f64>,
    /// [default: 0.2]
    #[arg(long)]
    mask_init_variance: Option<f64>,
    /// [default: 0.01]
    #[arg(long)]
    mask_lr: Option<f64>,
    /// Probability of dropping each kept frequency during training.
    #[arg(long)]
    random_drop: Option<f64>,
    /// Keep probability of dropout before dense layers, or `none`.
    #[arg(long)]
    dropout: Option<String>,
    /// none | crop | flip | crop+flip
    #[arg(long)]
    augment: Option<String>,
    /// Per-channel input normalization (on | off; bare flag means on).
    #[arg(long, num_args = 0..=1, default_missing_value = "on")]
    normalize: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first N training images.
    #[arg(long)]
    train_subset: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    test_subset: Option<usize>,
    /// Start weights from a checkpoint; masks are re-initialized.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Write loss curves and mask heatmaps to <out>/plots.
    #[arg(long)]
    plots: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true)]
    data: Option<PathBuf>,
    /// impulse_noise | fog | contrast | all
    #[arg(long, default_value = "all")]
    corruption: String,
    /// 0..5 or `all` (mean over 1..5)
    #[arg(long, default_value = "all")]
    severity: String,
    /// Row label [default: checkpoint name]
    #[arg(long)]
    variant: Option<String>,
    /// Read corrupted test sets from a dump written by `corrupt-preview --dump`.
    #[arg(long)]
    corruption_dir: Option<PathBuf>,
    #[arg(long)]
    test_subset: Option<usize>,
    /// Seed for on-the-fly corruption.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append the row to this CSV file (header written when new).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    /// CIFAR-10 directory (the test split is used).
    #[arg(long, required_unless_present = "input")]
    data: Option<PathBuf>,
    /// A single binary batch file instead of --data.
    #[arg(long, conflicts_with = "data")]
    input: Option<PathBuf>,
    /// impulse_noise | fog | contrast | all
    #[arg(long, default_value = "all")]
    corruption: String,
    /// Preview a single severity 0..5 [default: one row per severity]
    #[arg(long)]
    severity: Option<u8>,
    /// Number of images per preview row.
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "preview")]
    out: PathBuf,
    /// Write one corrupted batch file per (kind, severity) for the whole
    /// set instead of PNG previews.
    #[arg(long)]
    dump: bool,
    /// Corruption constants from a config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn kinds(arg: &str) -> Result<Vec<CorruptionKind>> {
    if arg == "all" {
        Ok(CorruptionKind::ALL.to_vec())
    } else {
        Ok(vec![arg.parse()?])
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    // arch comes first: stages/blocks/widths are only accepted for resnet
    let flags = [
        ("arch", a.arch.clone()),
        ("stages", a.stages.map(|v| v.to_string())),
        ("blocks", a.blocks.map(|v| v.to_string())),
        ("widths", a.widths.clone()),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("momentum", a.momentum.map(|v| v.to_string())),
        ("weight_decay", a.weight_decay.map(|v| v.to_string())),
        ("lr_decay_every", a.lr_decay_every.map(|v| v.to_string())),
        ("lr_decay_factor", a.lr_decay_factor.map(|v| v.to_string())),
        ("mask", a.mask.clone()),
        ("mask_init_mean", a.mask_init_mean.map(|v| v.to_string())),
        ("mask_init_variance", a.mask_init_variance.map(|v| v.to_string())),
        ("mask_lr", a.mask_lr.map(|v| v.to_string())),
        ("random_drop", a.random_drop.map(|v| v.to_string())),
        ("dropout", a.dropout.clone()),
        ("augment", a.augment.clone()),
        ("normalize", a.normalize.clone()),
        ("seed", a.seed.map(|v| v.to_string())),
        ("train_subset", a.train_subset.map(|v| v.to_string())),
        ("test_subset", a.test_subset.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = train_config(&a)?;
    let data = a.data.clone().expect("required by clap");
    let job = TrainJob {
        config,
        data,
        out: a.out.clone(),
        init_from: a.init_from.clone(),
        plots: a.plots,
    };
    let run = run_train(&job)?;
    print!("{}", run.metrics.summary());
    println!("outputs written to {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        kinds: kinds(&a.corruption)?,
        severity: a.severity.parse::<Severity>()?,
        seed: a.seed,
        dump_dir: a.corruption_dir.clone(),
        ..EvalOptions::default()
    };
    let data = a.data.clone().expect("required by clap");
    let row = run_eval(&a.checkpoint, &data, a.variant.as_deref(), a.test_subset, &opts)?;
    let csv = eval_csv(std::slice::from_ref(&row));
    print!("{csv}");
    if let Some(path) = &a.out {
        let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        let body = if fresh {
            csv
        } else {
            csv.strip_prefix(&format!("{EVAL_HEADER}\n"))
                .unwrap_or(&csv)
                .to_string()
        };
        f.write_all(body.as_bytes()).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let text = report_masks(&ck.net).to_string();
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text).map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

fn preview_set(a: &PreviewArgs) -> Result<Dataset> {
    match (&a.input, &a.data) {
        (Some(f), _) => read_batch_file(f),
        (None, Some(d)) => Ok(load_cifar10(d)?.1),
        (None, None) => Err(Error::InvalidArgument("one of --data or --input is required".into())),
    }
}

/// One row per severity, one column per image, 2px gaps.
fn preview_grid(
    ds: &Dataset,
    kind: CorruptionKind,
    severities: &[u8],
    seed: u64,
    consts: &specmask::data::CorruptionConstants,
) -> Result<image::RgbImage> {
    let [_, h, w] = ds.image_shape();
    let (h32, w32, gap) = (h as u32, w as u32, 2u32);
    let n = ds.len() as u32;
    let mut img = image::RgbImage::from_pixel(
        n * (w32 + gap),
        severities.len() as u32 * (h32 + gap),
        image::Rgb([255, 255, 255]),
    );
    for (row, &severity) in severities.iter().enumerate() {
        let out = corrupt_dataset(ds, CorruptionSpec::new(kind, severity)?, seed, consts)?;
        for i in 0..ds.len() {
            let px = out.images().item(i);
            for y in 0..h {
                for x in 0..w {
                    let v = |c: usize| (px[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0 as Real).round() as u8;
                    img.put_pixel(
                        i as u32 * (w32 + gap) + x as u32,
                        row as u32 * (h32 + gap) + y as u32,
                        image::Rgb([v(0), v(1), v(2)]),
                    );
                }
            }
        }
    }
    Ok(img)
}

fn preview(a: PreviewArgs) -> Result<()> {
    let consts = match &a.config {
        Some(p) => TrainConfig::from_file(p)?.corruption,
        None => Default::default(),
    };
    let kinds = kinds(&a.corruption)?;
    let ds = preview_set(&a)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    if a.dump {
        let files = write_corruption_dump(&a.out, &ds, &kinds, a.seed, &consts)?;
        println!("wrote {} corruption files to {}", files.len(), a.out.display());
        return Ok(());
    }
    let severities: Vec<u8> = match a.severity {
        Some(s) => vec![s],
        None => (0..=5).collect(),
    };
    let sample = ds.take(a.count.max(1));
    for kind in kinds {
        let path = a.out.join(format!("{kind}.png"));
        preview_grid(&sample, kind, &severities, a.seed, &consts)?
            .save(&path)
            .map_err(Error::Image)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ReportMasks(a) => report(a),
        Command::CorruptPreview(a) => preview(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
