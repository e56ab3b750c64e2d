//! Training configuration in a flat `key = value` text form. The same keys
//! are used by config files, the command line and checkpoint snapshots.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{AugmentMode, CorruptionConstants};
use crate::network::model::{Arch, MaskSettings, ModelSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Arch,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_decay_factor` every
    /// `lr_decay_every` epochs (0 disables the schedule).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub mask: bool,
    pub mask_init_mean: f64,
    pub mask_init_variance: f64,
    pub mask_lr: f64,
    pub random_drop: f64,
    /// Keep probability of dropout before dense layers.
    pub dropout: Option<f64>,
    pub augment: AugmentMode,
    pub normalize: bool,
    pub seed: u64,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub corruption: CorruptionConstants,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::LeNet,
            classes: 10,
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            mask: true,
            mask_init_mean: 0.8,
            mask_init_variance: 0.2,
            mask_lr: 0.01,
            random_drop: 0.0,
            dropout: None,
            augment: AugmentMode::none(),
            normalize: false,
            seed: 0,
            train_subset: None,
            test_subset: None,
            corruption: CorruptionConstants::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected on/off, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_five(key: &str, value: &str) -> Result<[f64; 5]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("`{key}`: expected 5 comma-separated values")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Parse `key = value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Set one key. Architecture keys `stages`, `blocks` and `widths` only
    /// apply to residual networks and switch `arch` to one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => {
                self.arch = match value {
                    "lenet" => Arch::LeNet,
                    "resnet" => match &self.arch {
                        a @ Arch::ResNet { .. } => a.clone(),
                        Arch::LeNet => Arch::resnet20(),
                    },
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown arch `{value}` (expected lenet or resnet)"
                        )))
                    }
                }
            }
            "stages" | "blocks" | "widths" => {
                let Arch::ResNet { stages, blocks, widths } = &mut self.arch else {
                    return Err(Error::Config(format!("`{key}` requires arch = resnet")));
                };
                match key {
                    "stages" => *stages = parse(key, value)?,
                    "blocks" => *blocks = parse(key, value)?,
                    _ => *widths = parse_list(key, value)?,
                }
            }
            "classes" => self.classes = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "mask" => self.mask = parse_bool(key, value)?,
            "mask_init_mean" => self.mask_init_mean = parse(key, value)?,
            "mask_init_variance" => self.mask_init_variance = parse(key, value)?,
            "mask_lr" => self.mask_lr = parse(key, value)?,
            "random_drop" => self.random_drop = parse(key, value)?,
            "dropout" => {
                self.dropout = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "augment" => self.augment = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "train_subset" => self.train_subset = subset(key, value)?,
            "test_subset" => self.test_subset = subset(key, value)?,
            "impulse_noise" => self.corruption.impulse = parse_five(key, value)?,
            "contrast" => self.corruption.contrast = parse_five(key, value)?,
            "fog" => {
                let pairs: Vec<(f64, f64)> = value
                    .split(',')
                    .map(|p| {
                        let (f, d) = p
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("`fog`: expected strength:decay, got `{p}`")))?;
                        Ok((parse(key, f)?, parse(key, d)?))
                    })
                    .collect::<Result<_>>()?;
                self.corruption.fog = pairs
                    .try_into()
                    .map_err(|_| Error::Config("`fog`: expected 5 strength:decay pairs".into()))?;
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.mask_lr >= 0.0 && self.mask_lr.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.random_drop) {
            return bad(format!("random_drop must be in [0, 1], got {}", self.random_drop));
        }
        if !(0.0..=1.0).contains(&self.mask_init_mean) || !(self.mask_init_variance >= 0.0) {
            return bad("mask init needs mean in [0, 1] and variance >= 0".into());
        }
        if let Some(k) = self.dropout {
            if !(k > 0.0 && k <= 1.0) {
                return bad(format!("dropout keep probability must be in (0, 1], got {k}"));
            }
        }
        if self.classes == 0 {
            return bad("classes must be positive".into());
        }
        Ok(())
    }

    pub fn model_spec(&self, input: [usize; 3]) -> ModelSpec {
        ModelSpec {
            arch: self.arch.clone(),
            input,
            classes: self.classes,
            mask_enabled: self.mask,
            dropout_keep: self.dropout,
        }
    }

    pub fn mask_settings(&self) -> MaskSettings {
        MaskSettings {
            mean: self.mask_init_mean,
            variance: self.mask_init_variance,
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
        }
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.arch {
            Arch::LeNet => kv("arch", "lenet".into()),
            Arch::ResNet { stages, blocks, widths } => {
                kv("arch", "resnet".into());
                kv("stages", stages.to_string());
                kv("blocks", blocks.to_string());
                kv("widths", join(widths));
            }
        }
        kv("classes", self.classes.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lr_decay_every", self.lr_decay_every.to_string());
        kv("lr_decay_factor", self.lr_decay_factor.to_string());
        kv("mask", if self.mask { "on" } else { "off" }.into());
        kv("mask_init_mean", self.mask_init_mean.to_string());
        kv("mask_init_variance", self.mask_init_variance.to_string());
        kv("mask_lr", self.mask_lr.to_string());
        kv("random_drop", self.random_drop.to_string());
        kv("dropout", self.dropout.map_or("none".into(), |k| k.to_string()));
        kv("augment", self.augment.to_string());
        kv("normalize", if self.normalize { "on" } else { "off" }.into());
        kv("seed", self.seed.to_string());
        kv(
            "train_subset",
            self.train_subset.map_or("all".into(), |n| n.to_string()),
        );
        kv("test_subset", self.test_subset.map_or("all".into(), |n| n.to_string()));
        kv("impulse_noise", join(&self.corruption.impulse));
        kv("contrast", join(&self.corruption.contrast));
        let fog: Vec<String> = self.corruption.fog.iter().map(|(f, d)| format!("{f}:{d}")).collect();
        kv("fog", fog.join(","));
        s
    }
}

fn subset(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "all" | "none" => Ok(None),
        v => Ok(Some(parse(key, v)?)),
    }
}
