//! Image datasets, the CIFAR-10 binary reader and the corruption suite.

mod cifar;
mod corrupt;
mod dump;
mod transform;

pub use cifar::{load_cifar10, read_batch_file, write_batch_file, RECORD_BYTES};
pub use corrupt::{corrupt, corrupt_dataset, plasma_fractal, CorruptionConstants};
pub use dump::{dump_file_name, load_corruption_dump, write_corruption_dump};
pub use transform::{augment, augment_batch, AugmentMode, Augmentation};

use std::fmt;
use std::str::FromStr;

use crate::{Error, Real, Result, Tensor};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const CLASSES: usize = 10;

/// Per-channel statistics used to normalize a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = (0..CHANNELS).find(|&c| !(self.std[c] > 0.0) || !self.std[c].is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "normalization std for channel {c} must be positive, got {}",
                self.std[c]
            )));
        }
        Ok(())
    }
}

/// Labelled images stored as an `[N, 3, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "dataset images must be [N, {CHANNELS}, H, W], got {s:?}"
            )));
        }
        if s[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images but {} labels",
                s[0],
                labels.len()
            )));
        }
        if s[0] == 0 {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
        if !images.all_finite() {
            return Err(Error::InvalidArgument("dataset has non-finite pixels".into()));
        }
        Ok(Dataset {
            images,
            labels,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Statistics applied by [`normalize`], if any.
    pub fn stats(&self) -> Option<ChannelStats> {
        self.stats
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// First `n` samples (or all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let [c, h, w] = self.image_shape();
        let k = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(self.images.item(i));
        }
        Dataset {
            images: Tensor::from_vec(&[indices.len(), c, h, w], data).expect("sizes agree"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            stats: self.stats,
        }
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> ChannelStats {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        for ch in 0..c {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for n in 0..self.len() {
                let x = &self.images.item(n)[ch * plane..(ch + 1) * plane];
                for &v in x {
                    s += v as f64;
                }
            }
            let count = (self.len() * plane) as f64;
            let m = s / count;
            for n in 0..self.len() {
                let x = &self.images.item(n)[ch * plane..(ch + 1) * plane];
                for &v in x {
                    s2 += (v as f64 - m).powi(2);
                }
            }
            mean[ch] = m;
            std[ch] = (s2 / count).sqrt();
        }
        ChannelStats { mean, std }
    }

    pub(crate) fn map_images(&self, images: Tensor) -> Dataset {
        Dataset {
            images,
            labels: self.labels.clone(),
            stats: self.stats,
        }
    }
}

/// `x' = (x - mean_c) / std_c` per channel.
pub fn normalize(ds: &Dataset, stats: ChannelStats) -> Result<Dataset> {
    stats.validate()?;
    let mut images = ds.images.clone();
    normalize_in_place(&mut images, &stats);
    Ok(Dataset {
        images,
        labels: ds.labels.clone(),
        stats: Some(stats),
    })
}

/// Apply `stats` to an `[N, C, H, W]` tensor without validation.
pub fn normalize_in_place(images: &mut Tensor, stats: &ChannelStats) {
    let s = images.shape().to_vec();
    let plane = s[2] * s[3];
    for n in 0..s[0] {
        let item = images.item_mut(n);
        for ch in 0..s[1] {
            let (m, sd) = (stats.mean[ch], stats.std[ch]);
            for v in &mut item[ch * plane..(ch + 1) * plane] {
                *v = ((*v as f64 - m) / sd) as Real;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    ImpulseNoise,
    Fog,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Fog,
        CorruptionKind::Contrast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "impulse_noise" | "impulse" => Ok(CorruptionKind::ImpulseNoise),
            "fog" => Ok(CorruptionKind::Fog),
            "contrast" => Ok(CorruptionKind::Contrast),
            _ => Err(Error::InvalidArgument(format!(
                "unknown corruption `{s}` (expected impulse_noise, fog or contrast)"
            ))),
        }
    }
}

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 0 is the identity, 1..=5 increasingly strong.
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::InvalidArgument(format!(
                "severity {severity} out of range 0..={MAX_SEVERITY}"
            )));
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(values: Vec<Real>, n: usize) -> Dataset {
        Dataset::new(Tensor::from_vec(&[n, 3, 2, 2], values).unwrap(), vec![0; n]).unwrap()
    }

    #[test]
    fn identity_normalization() {
        let d = ds((0..24).map(|v| v as Real / 24.0).collect(), 2);
        let stats = ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        assert_eq!(normalize(&d, stats).unwrap().images(), d.images());
    }

    #[test]
    fn constant_half_centers_to_zero() {
        let d = ds(vec![0.5; 12], 1);
        let stats = ChannelStats {
            mean: [0.5; 3],
            std: [0.25; 3],
        };
        assert!(normalize(&d, stats).unwrap().images().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_computed_stats_center_channels() {
        use rand::{Rng as _, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let n = 50;
        let d = Dataset::new(
            Tensor::from_vec(&[n, 3, 8, 8], (0..n * 192).map(|_| rng.random::<Real>()).collect()).unwrap(),
            vec![1; n],
        )
        .unwrap();
        let out = normalize(&d, d.channel_stats()).unwrap();
        let after = out.channel_stats();
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-6, "{:?}", after.mean);
            assert!((after.std[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_std_rejected() {
        let d = ds(vec![0.5; 12], 1);
        let stats = ChannelStats {
            mean: [0.0; 3],
            std: [1.0, 0.0, 1.0],
        };
        assert!(matches!(normalize(&d, stats), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dataset_invariants() {
        assert!(Dataset::new(Tensor::zeros(&[1, 3, 2, 2]), vec![10]).is_err());
        assert!(Dataset::new(Tensor::zeros(&[0, 3, 2, 2]), vec![]).is_err());
        assert!(Dataset::new(Tensor::zeros(&[2, 3, 2, 2]), vec![1]).is_err());
        let mut t = Tensor::zeros(&[1, 3, 2, 2]);
        t.data_mut()[0] = Real::NAN;
        assert!(Dataset::new(t, vec![1]).is_err());
    }

    #[test]
    fn corruption_names_roundtrip() {
        for k in CorruptionKind::ALL {
            assert_eq!(k.as_str().parse::<CorruptionKind>().unwrap(), k);
        }
        assert!("blur".parse::<CorruptionKind>().is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Fog, 6).is_err());
    }
}
