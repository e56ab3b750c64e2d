//! File-level entry points used by the command-line tool.

use std::path::{Path, PathBuf};

use crate::data::{load_cifar10, Dataset};
use crate::{Error, Result};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::TrainConfig;
use super::eval::{evaluate, EvalOptions, EvalRow};
use super::plots::write_plots;
use super::train::{train, TrainRun};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone)]
pub struct TrainJob {
    pub config: TrainConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    pub init_from: Option<PathBuf>,
    pub plots: bool,
}

/// Train from CIFAR-10 files and write `metrics.csv`, `summary.txt`,
/// `config.txt`, `checkpoint.bin` and optionally `plots/` into `out`.
pub fn run_train(job: &TrainJob) -> Result<TrainRun> {
    let (train_set, test_set) = load_cifar10(&job.data)?;
    let init = job.init_from.as_deref().map(load_checkpoint).transpose()?;
    train_to_dir(&job.config, &train_set, &test_set, init.as_ref(), &job.out, job.plots)
}

/// [`run_train`] on in-memory datasets.
pub fn train_to_dir(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    init: Option<&Checkpoint>,
    out: &Path,
    plots: bool,
) -> Result<TrainRun> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut run = train(cfg, train_set, test_set, init, &mut |_| {})?;
    run.metrics.write(out)?;
    let text = cfg.to_text();
    std::fs::write(out.join("config.txt"), &text)
        .map_err(|e| Error::io(format!("writing {}", out.join("config.txt").display()), e))?;
    save_checkpoint(
        &out.join(CHECKPOINT_FILE),
        &mut run.net,
        &run.optimizer,
        &text,
        cfg.epochs as u64,
        run.stats,
    )?;
    if plots {
        write_plots(&out.join("plots"), &run.metrics, &run.net)?;
    }
    Ok(run)
}

/// Evaluate a checkpoint on the CIFAR-10 test split. Corruption constants
/// come from the checkpoint's config snapshot when it has one. The variant
/// label defaults to the checkpoint's file stem (or its directory name for
/// `checkpoint.bin`).
pub fn run_eval(
    checkpoint: &Path,
    data: &Path,
    variant: Option<&str>,
    test_subset: Option<usize>,
    opts: &EvalOptions,
) -> Result<EvalRow> {
    let mut ck = load_checkpoint(checkpoint)?;
    let mut opts = opts.clone();
    if let Ok(cfg) = TrainConfig::from_text(&ck.config) {
        opts.constants = cfg.corruption;
    }
    let (_, test) = load_cifar10(data)?;
    let test = test_subset.map_or(test.clone(), |n| test.take(n));
    let label = variant.map(str::to_string).unwrap_or_else(|| variant_label(checkpoint));
    evaluate(&mut ck.net, &label, &test, ck.stats, &opts)
}

fn variant_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    if stem == "checkpoint" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return dir.to_string();
        }
    }
    stem.to_string()
}
