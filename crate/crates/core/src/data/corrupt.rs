use rand::Rng as _;
use rayon::prelude::*;

use crate::rng::{self, tag, Rng};
use crate::{Error, Real, Result, Tensor};

use super::{CorruptionKind, CorruptionSpec, Dataset, MAX_SEVERITY};

/// Per-severity constants (index 0 is severity 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionConstants {
    /// Fraction of values replaced by salt or pepper.
    pub impulse: [f64; 5],
    /// Contrast scale about the channel mean.
    pub contrast: [f64; 5],
    /// Fog strength and plasma roughness decay.
    pub fog: [(f64, f64); 5],
}

impl Default for CorruptionConstants {
    fn default() -> Self {
        CorruptionConstants {
            impulse: [0.03, 0.06, 0.09, 0.17, 0.27],
            contrast: [0.4, 0.3, 0.2, 0.1, 0.05],
            fog: [(1.5, 2.0), (2.0, 2.0), (2.5, 1.7), (2.5, 1.5), (3.0, 1.4)],
        }
    }
}

/// Corrupt one `[C, H, W]` image with values in [0, 1].
pub fn corrupt(
    img: &[Real],
    shape: [usize; 3],
    spec: CorruptionSpec,
    seed: u64,
    consts: &CorruptionConstants,
) -> Result<Vec<Real>> {
    if spec.severity > MAX_SEVERITY {
        return Err(Error::InvalidArgument(format!(
            "severity {} out of range 0..={MAX_SEVERITY}",
            spec.severity
        )));
    }
    let [c, h, w] = shape;
    if img.len() != c * h * w {
        return Err(Error::ShapeMismatch(format!(
            "image has {} values, shape {shape:?}",
            img.len()
        )));
    }
    if spec.severity == 0 {
        return Ok(img.to_vec());
    }
    let s = spec.severity as usize - 1;
    let mut r = rng::rng_for(seed, &[]);
    Ok(match spec.kind {
        CorruptionKind::ImpulseNoise => impulse(img, consts.impulse[s], &mut r),
        CorruptionKind::Contrast => contrast(img, shape, consts.contrast[s]),
        CorruptionKind::Fog => {
            let (f, decay) = consts.fog[s];
            fog(img, shape, f, decay, &mut r)
        }
    })
}

fn impulse(img: &[Real], p: f64, r: &mut Rng) -> Vec<Real> {
    img.iter()
        .map(|&v| {
            if r.random_bool(p) {
                if r.random_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        })
        .collect()
}

fn contrast(img: &[Real], shape: [usize; 3], scale: f64) -> Vec<Real> {
    let [c, h, w] = shape;
    let plane = h * w;
    let mut out = Vec::with_capacity(img.len());
    for ch in 0..c {
        let x = &img[ch * plane..(ch + 1) * plane];
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        out.extend(
            x.iter()
                .map(|&v| ((v as f64 - mean) * scale + mean).clamp(0.0, 1.0) as Real),
        );
    }
    out
}

fn fog(img: &[Real], shape: [usize; 3], strength: f64, decay: f64, r: &mut Rng) -> Vec<Real> {
    let [c, h, w] = shape;
    let size = h.max(w).next_power_of_two().max(2);
    let plasma = plasma_fractal(size, decay, r);
    let max = img.iter().fold(0.0f64, |m, &v| m.max(v as f64));
    let gain = max / (max + strength);
    let mut out = Vec::with_capacity(img.len());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = img[(ch * h + y) * w + x] as f64 + strength * plasma[y * size + x];
                out.push((v * gain).clamp(0.0, 1.0) as Real);
            }
        }
    }
    out
}

/// Diamond-square fractal noise on a `size x size` torus (size a power of
/// two), rescaled to [0, 1]. `decay` divides the perturbation amplitude at
/// each refinement level.
pub fn plasma_fractal(size: usize, decay: f64, r: &mut Rng) -> Vec<f64> {
    assert!(
        size.is_power_of_two() && size >= 2,
        "plasma size must be a power of two"
    );
    let mut map = vec![0.0f64; size * size];
    let at = |y: usize, x: usize| (y % size) * size + (x % size);
    let mut step = size;
    let mut wibble = 100.0f64;
    let jitter = |sum: f64, wibble: f64, r: &mut Rng| sum / 4.0 + wibble * r.random_range(-wibble..wibble);
    while step >= 2 {
        let half = step / 2;
        // squares: centre of each cell from its four corners
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let sum = map[at(y, x)] + map[at(y + step, x)] + map[at(y, x + step)] + map[at(y + step, x + step)];
                map[at(y + half, x + half)] = jitter(sum, wibble, r);
            }
        }
        // diamonds on cell edges, horizontal then vertical
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let sum = map[at(y + half, x + half)]
                    + map[at(y + size - half, x + half)]
                    + map[at(y, x)]
                    + map[at(y, x + step)];
                map[at(y, x + half)] = jitter(sum, wibble, r);
            }
        }
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let sum = map[at(y + half, x + half)]
                    + map[at(y + half, x + size - half)]
                    + map[at(y, x)]
                    + map[at(y + step, x)];
                map[at(y + half, x)] = jitter(sum, wibble, r);
            }
        }
        step /= 2;
        wibble /= decay;
    }
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    for v in &mut map {
        *v -= lo;
    }
    let hi = map.iter().cloned().fold(0.0, f64::max);
    if hi > 0.0 {
        for v in &mut map {
            *v /= hi;
        }
    }
    map
}

/// Corrupt every image; sample `i` uses a seed derived from
/// (`seed`, kind, severity, `i`).
pub fn corrupt_dataset(ds: &Dataset, spec: CorruptionSpec, seed: u64, consts: &CorruptionConstants) -> Result<Dataset> {
    if spec.severity == 0 {
        return Ok(ds.clone());
    }
    let shape = ds.image_shape();
    let kind = CorruptionKind::ALL.iter().position(|&k| k == spec.kind).unwrap_or(0) as u64;
    let items: Vec<Vec<Real>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let s = rng::derive_seed(seed, &[tag::CORRUPT, kind, spec.severity as u64, i as u64]);
            corrupt(ds.images().item(i), shape, spec, s, consts)
        })
        .collect::<Result<_>>()?;
    let images = Tensor::from_vec(ds.images().shape(), items.concat())?;
    Ok(ds.map_images(images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const SHAPE: [usize; 3] = [3, 32, 32];

    fn random_image(seed: u64) -> Vec<Real> {
        let mut r = Rng::seed_from_u64(seed);
        (0..3 * 32 * 32).map(|_| r.random_range(0.01..0.99) as Real).collect()
    }

    fn spec(kind: CorruptionKind, severity: u8) -> CorruptionSpec {
        CorruptionSpec { kind, severity }
    }

    #[test]
    fn severity_zero_is_identity() {
        let img = random_image(1);
        for k in CorruptionKind::ALL {
            assert_eq!(corrupt(&img, SHAPE, spec(k, 0), 5, &Default::default()).unwrap(), img);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range_and_are_pure() {
        let img = random_image(2);
        let c = CorruptionConstants::default();
        for k in CorruptionKind::ALL {
            for s in 1..=5 {
                let a = corrupt(&img, SHAPE, spec(k, s), 11, &c).unwrap();
                assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)), "{k} {s}");
                assert_eq!(a, corrupt(&img, SHAPE, spec(k, s), 11, &c).unwrap());
            }
        }
    }

    #[test]
    fn contrast_shrinks_variance() {
        let img = random_image(3);
        let out = corrupt(&img, SHAPE, spec(CorruptionKind::Contrast, 5), 0, &Default::default()).unwrap();
        let var = |x: &[Real]| {
            let m = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
            x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / x.len() as f64
        };
        for ch in 0..3 {
            let r = 1024 * ch..1024 * (ch + 1);
            let ratio = var(&out[r.clone()]) / var(&img[r]);
            assert!((ratio / 0.0025 - 1.0).abs() < 1e-6, "{ratio}");
        }
    }

    #[test]
    fn impulse_fraction() {
        let c = CorruptionConstants::default();
        let mut changed = 0usize;
        let mut total = 0usize;
        for i in 0..50 {
            let img = random_image(100 + i);
            let out = corrupt(&img, SHAPE, spec(CorruptionKind::ImpulseNoise, 3), i, &c).unwrap();
            changed += img.iter().zip(&out).filter(|(a, b)| a != b).count();
            total += img.len();
        }
        let p = 0.09;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        assert!((changed as f64 / total as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn plasma_is_normalized_and_seeded() {
        let a = plasma_fractal(32, 2.0, &mut Rng::seed_from_u64(1));
        let b = plasma_fractal(32, 2.0, &mut Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(a.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn fog_output_bounded_by_gain() {
        let img = vec![0.2 as Real; 3 * 32 * 32];
        let out = corrupt(&img, SHAPE, spec(CorruptionKind::Fog, 5), 4, &Default::default()).unwrap();
        // gain 0.2 / 3.2 maps 0.2 + 3 * plasma into [0.0125, 0.2]
        assert!(out.iter().all(|&v| (0.0125 - 1e-6..=0.2 + 1e-6).contains(&(v as f64))));
        assert!(out.iter().any(|&v| v != out[0]));
    }

    #[test]
    fn bad_severity() {
        let img = random_image(0);
        assert!(corrupt(&img, SHAPE, spec(CorruptionKind::Fog, 6), 0, &Default::default()).is_err());
    }
}
