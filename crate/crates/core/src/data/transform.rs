use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::rng::{self, tag};
use crate::{Error, Real, Result, Tensor};

const PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentMode {
    pub crop: bool,
    pub flip: bool,
}

impl AugmentMode {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_none(&self) -> bool {
        !self.crop && !self.flip
    }
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.crop, self.flip) {
            (false, false) => "none",
            (true, false) => "crop",
            (false, true) => "flip",
            (true, true) => "crop+flip",
        })
    }
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentMode {
                crop: false,
                flip: false,
            }),
            "crop" => Ok(AugmentMode {
                crop: true,
                flip: false,
            }),
            "flip" => Ok(AugmentMode {
                crop: false,
                flip: true,
            }),
            "crop+flip" | "flip+crop" => Ok(AugmentMode { crop: true, flip: true }),
            _ => Err(Error::InvalidArgument(format!(
                "unknown augmentation `{s}` (expected none, crop, flip or crop+flip)"
            ))),
        }
    }
}

/// A concrete draw: crop window origin in the padded image and whether to
/// mirror horizontally. Origin `(4, 4)` without flip is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub offset: (usize, usize),
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        offset: (PAD, PAD),
        flip: false,
    };

    pub fn sample(mode: AugmentMode, seed: u64) -> Self {
        let mut r = rng::rng_for(seed, &[]);
        let offset = if mode.crop {
            (r.random_range(0..=2 * PAD), r.random_range(0..=2 * PAD))
        } else {
            (PAD, PAD)
        };
        let flip = mode.flip && r.random_bool(0.5);
        Augmentation { offset, flip }
    }

    /// Apply to one `[C, H, W]` image.
    pub fn apply(&self, img: &[Real], shape: [usize; 3]) -> Vec<Real> {
        let [c, h, w] = shape;
        debug_assert_eq!(img.len(), c * h * w);
        let (oy, ox) = self.offset;
        let mut out = vec![0.0; img.len()];
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + oy) as isize - PAD as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let dx = if self.flip { w - 1 - x } else { x };
                    let sx = (dx + ox) as isize - PAD as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
        out
    }
}

/// Pad-4 random crop and/or horizontal flip of a single image, determined by
/// `seed`.
pub fn augment(img: &[Real], shape: [usize; 3], mode: AugmentMode, seed: u64) -> Vec<Real> {
    if mode.is_none() {
        return img.to_vec();
    }
    Augmentation::sample(mode, seed).apply(img, shape)
}

/// Augment every image of a batch. `ids` are the dataset indices of the
/// samples, so each draw depends only on (seed, epoch, sample).
pub fn augment_batch(batch: &Tensor, ids: &[usize], mode: AugmentMode, seed: u64, epoch: usize) -> Tensor {
    if mode.is_none() {
        return batch.clone();
    }
    let s = batch.shape();
    let shape = [s[1], s[2], s[3]];
    let items: Vec<Vec<Real>> = (0..batch.batch())
        .into_par_iter()
        .map(|n| {
            let sample_seed = rng::derive_seed(seed, &[tag::AUGMENT, epoch as u64, ids[n] as u64]);
            augment(batch.item(n), shape, mode, sample_seed)
        })
        .collect();
    Tensor::from_vec(s, items.concat()).expect("same shape")
}
