use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{
    corrupt_dataset, load_corruption_dump, normalize, ChannelStats, CorruptionConstants, CorruptionKind,
    CorruptionSpec, Dataset, MAX_SEVERITY,
};
use crate::network::model::Network;
use crate::{Error, Result};

use super::train::accuracy;

pub const EVAL_HEADER: &str = "variant,clear,impulse_noise,fog,contrast";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Level(u8),
    /// Mean accuracy over severities 1 to 5.
    All,
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Severity::All);
        }
        match s.parse::<u8>() {
            Ok(v) if v <= MAX_SEVERITY => Ok(Severity::Level(v)),
            _ => Err(Error::InvalidArgument(format!(
                "severity must be 0..={MAX_SEVERITY} or `all`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub kinds: Vec<CorruptionKind>,
    pub severity: Severity,
    pub seed: u64,
    pub constants: CorruptionConstants,
    /// Read corrupted sets from a pre-generated dump instead of corrupting
    /// on the fly.
    pub dump_dir: Option<PathBuf>,
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            kinds: CorruptionKind::ALL.to_vec(),
            severity: Severity::All,
            seed: 0,
            constants: CorruptionConstants::default(),
            dump_dir: None,
            batch: 256,
        }
    }
}

/// One evaluated model. Corruption columns that were not requested are
/// `None` and print as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    pub clear: f64,
    pub impulse_noise: Option<f64>,
    pub fog: Option<f64>,
    pub contrast: Option<f64>,
}

impl EvalRow {
    pub fn get(&self, kind: CorruptionKind) -> Option<f64> {
        match kind {
            CorruptionKind::ImpulseNoise => self.impulse_noise,
            CorruptionKind::Fog => self.fog,
            CorruptionKind::Contrast => self.contrast,
        }
    }

    fn slot(&mut self, kind: CorruptionKind) -> &mut Option<f64> {
        match kind {
            CorruptionKind::ImpulseNoise => &mut self.impulse_noise,
            CorruptionKind::Fog => &mut self.fog,
            CorruptionKind::Contrast => &mut self.contrast,
        }
    }
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
    let mut s = format!("{EVAL_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{},{},{}",
            r.variant,
            r.clear,
            cell(r.impulse_noise),
            cell(r.fog),
            cell(r.contrast)
        );
    }
    s
}

fn accuracy_on(net: &mut Network, raw: &Dataset, stats: Option<ChannelStats>, batch: usize) -> Result<f64> {
    match stats {
        Some(s) => accuracy(net, &normalize(raw, s)?, batch),
        None => accuracy(net, raw, batch),
    }
}

/// Evaluate in eval mode on clean and corrupted copies of `test`, which
/// holds raw [0, 1] images; `stats` are the training normalization, applied
/// after corruption.
pub fn evaluate(
    net: &mut Network,
    variant: &str,
    test: &Dataset,
    stats: Option<ChannelStats>,
    opts: &EvalOptions,
) -> Result<EvalRow> {
    if test.image_shape() != net.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects {:?} images, data has {:?}",
            net.input_shape(),
            test.image_shape()
        )));
    }
    let mut row = EvalRow {
        variant: variant.to_string(),
        clear: accuracy_on(net, test, stats, opts.batch)?,
        impulse_noise: None,
        fog: None,
        contrast: None,
    };
    let levels: Vec<u8> = match opts.severity {
        Severity::Level(v) => vec![v],
        Severity::All => (1..=MAX_SEVERITY).collect(),
    };
    for &kind in &opts.kinds {
        let mut total = 0.0;
        for &severity in &levels {
            let spec = CorruptionSpec::new(kind, severity)?;
            let corrupted = match (&opts.dump_dir, severity) {
                (Some(dir), s) if s > 0 => {
                    let ds = load_corruption_dump(dir, spec)?;
                    if ds.len() < test.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "corruption dump for {kind} severity {severity} has {} images, test set has {}",
                            ds.len(),
                            test.len()
                        )));
                    }
                    ds.take(test.len())
                }
                _ => corrupt_dataset(test, spec, opts.seed, &opts.constants)?,
            };
            total += accuracy_on(net, &corrupted, stats, opts.batch)?;
        }
        *row.slot(kind) = Some(total / levels.len() as f64);
    }
    Ok(row)
}
