//! Frequency-domain convolution with a learnable binarized spectral mask.
//!
//! For one sample and output channel `o` the layer computes the pre-mask
//! spectrum of the (linear) cross-correlation
//!
//! ```text
//! S_o = sqrt(P*Q) * sum_i dft2(embed(x_i)) * conj(dft2(pad(w_{o,i})))
//! ```
//!
//! on a `P x Q = (H+K-1) x (W+K-1)` grid, gates it with the binarized mask
//! and transforms back. Inputs are embedded at offset `K-1`, so the inverse
//! transform holds the *full* correlation and a "same" window starts at
//! offset `K-1-pad`. The `sqrt(P*Q)` factor turns the product of two unitary
//! transforms into an exact circular correlation.
//!
//! One `P x Q` mask is shared by every channel pair of a layer and applied
//! after the input-channel sum. The backward pass is straight-through: the
//! binarized mask gates the gradient flowing to weights and inputs, while the
//! real-valued mask receives `Re(dS * conj(S))` summed over the batch and the
//! output channels.

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::network::optim::sgd_momentum_step;
use crate::numerics::Fft2;
use crate::rng::{self, Rng};
use crate::{Error, Real, Result, Tensor};

/// Entries at or above this value binarize to 1.
pub const BINARIZE_THRESHOLD: Real = 0.5;

/// Continuous per-layer mask and its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams {
    height: usize,
    width: usize,
    values: Vec<Real>,
    momentum: Vec<Real>,
}

impl MaskParams {
    /// Mask with every entry set to `value` (clipped to `[0, 1]`).
    pub fn constant(height: usize, width: usize, value: Real) -> Self {
        MaskParams {
            height,
            width,
            values: vec![value.clamp(0.0, 1.0); height * width],
            momentum: vec![0.0; height * width],
        }
    }

    pub fn from_parts(height: usize, width: usize, values: Vec<Real>, momentum: Vec<Real>) -> Result<Self> {
        let n = height * width;
        if n == 0 || values.len() != n || momentum.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} mask with {} values and {} momentum entries",
                values.len(),
                momentum.len()
            )));
        }
        Ok(MaskParams {
            height,
            width,
            values,
            momentum,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    /// Raw access for tests and checkpoint loading. Callers are responsible
    /// for keeping entries in `[0, 1]`.
    pub fn values_mut(&mut self) -> &mut [Real] {
        &mut self.values
    }

    pub fn momentum(&self) -> &[Real] {
        &self.momentum
    }

    pub fn momentum_mut(&mut self) -> &mut [Real] {
        &mut self.momentum
    }

    /// Largest `|M[h][w] - M[-h][-w]|`.
    pub fn hermitian_error(&self) -> f64 {
        let (p, q) = (self.height, self.width);
        let mut worst = 0.0f64;
        for h in 0..p {
            for w in 0..q {
                let a = self.values[h * q + w];
                let b = self.values[((p - h) % p) * q + (q - w) % q];
                worst = worst.max(f64::from(a - b).abs());
            }
        }
        worst
    }
}

/// Binarized view of a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} binary mask with {} entries",
                bits.len()
            )));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn to_reals(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Replace `values[i]` with the mean of itself and its Hermitian mirror.
fn symmetrize(values: &mut [Real], height: usize, width: usize) {
    let src = values.to_vec();
    for h in 0..height {
        for w in 0..width {
            let m = ((height - h) % height) * width + (width - w) % width;
            values[h * width + w] = (src[h * width + w] + src[m]) * 0.5;
        }
    }
}

/// Sample a `p x q` mask from `N(mean, variance)`, clip to `[0, 1]` and
/// symmetrize. `variance` is a variance, not a standard deviation.
pub fn init_mask(p: usize, q: usize, mean: f64, variance: f64, seed: u64) -> Result<MaskParams> {
    if p == 0 || q == 0 {
        return Err(Error::Dimension(format!("mask must be at least 1x1, got {p}x{q}")));
    }
    if !(variance >= 0.0) || !variance.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mask init needs finite mean and variance >= 0, got mean {mean}, variance {variance}"
        )));
    }
    let mut values: Vec<Real> = if variance == 0.0 {
        vec![mean.clamp(0.0, 1.0) as Real; p * q]
    } else {
        let mut rng = rng::rng_for(seed, &[rng::tag::MASK_INIT]);
        let normal = Normal::new(mean, variance.sqrt())
            .map_err(|e| Error::InvalidArgument(format!("mask init distribution: {e}")))?;
        (0..p * q)
            .map(|_| normal.sample(&mut rng).clamp(0.0, 1.0) as Real)
            .collect()
    };
    symmetrize(&mut values, p, q);
    Ok(MaskParams {
        height: p,
        width: q,
        values,
        momentum: vec![0.0; p * q],
    })
}

pub fn binarize(mask: &MaskParams) -> BinaryMask {
    BinaryMask {
        height: mask.height,
        width: mask.width,
        bits: mask.values.iter().map(|&v| v >= BINARIZE_THRESHOLD).collect(),
    }
}

/// Momentum-SGD step on the continuous mask, then clip to `[0, 1]` and
/// symmetrize. No weight decay.
pub fn update_mask(mask: &mut MaskParams, grad: &[Real], lr: Real, momentum: Real) -> Result<()> {
    if grad.len() != mask.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask gradient has {} entries, mask has {}",
            grad.len(),
            mask.values.len()
        )));
    }
    sgd_momentum_step(&mut mask.values, grad, &mut mask.momentum, lr, momentum, 0.0, true)?;
    for v in &mut mask.values {
        *v = v.clamp(0.0, 1.0);
    }
    symmetrize(&mut mask.values, mask.height, mask.width);
    Ok(())
}

/// Fraction of bins whose binarized mask is 0.
pub fn mask_percentage(mask: &MaskParams) -> f64 {
    let zeros = mask.values.iter().filter(|&&v| v < BINARIZE_THRESHOLD).count();
    zeros as f64 / mask.values.len() as f64
}

/// Zero each 1-entry independently with probability `p`.
pub fn random_drop(mask: &BinaryMask, p: f64, seed: u64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "random drop probability must be in [0, 1], got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(mask.clone());
    }
    let mut rng = rng::rng_for(seed, &[rng::tag::RANDOM_DROP]);
    let bits = mask.bits.iter().map(|&b| b && !rng.random_bool(p)).collect();
    Ok(BinaryMask {
        height: mask.height,
        width: mask.width,
        bits,
    })
}

/// How the forward pass turns the continuous mask into the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardMask {
    /// Threshold at [`BINARIZE_THRESHOLD`].
    #[default]
    Binarized,
    /// Use the continuous values directly (gradient-check hook).
    Identity,
}

/// Which mask gates the gradient flowing back to weights and inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMask {
    /// The mask actually used in the forward pass.
    #[default]
    Forward,
    /// The continuous mask, regardless of what the forward used.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskHooks {
    pub forward: ForwardMask,
    pub backward: BackwardMask,
}

/// Mask initialization for a new layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskInit {
    /// Trainable mask when true; frozen all-ones mask otherwise.
    pub enabled: bool,
    pub mean: f64,
    pub variance: f64,
    pub seed: u64,
}

impl MaskInit {
    pub fn disabled() -> Self {
        MaskInit {
            enabled: false,
            mean: 1.0,
            variance: 0.0,
            seed: 0,
        }
    }
}

/// Convolution weights, bias and spectral mask.
#[derive(Debug, Clone)]
pub struct SpectralConvLayer {
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    height: usize,
    width: usize,
    stride: usize,
    pad: usize,
    weights: Vec<Real>,
    bias: Vec<Real>,
    mask: MaskParams,
    mask_trainable: bool,
    pub hooks: MaskHooks,
    fft: Fft2,
}

/// Layer geometry, used when building layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    /// "Same" padding, stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, height: usize, width: usize) -> Self {
        ConvShape {
            in_channels,
            out_channels,
            kernel,
            height,
            width,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn padded(&self) -> (usize, usize) {
        (self.height + self.kernel - 1, self.width + self.kernel - 1)
    }

    /// Spatial size before striding.
    fn full_out(&self) -> (usize, usize) {
        (
            self.height + 2 * self.pad + 1 - self.kernel,
            self.width + 2 * self.pad + 1 - self.kernel,
        )
    }

    pub fn output(&self) -> (usize, usize) {
        let (h, w) = self.full_out();
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn validate(&self) -> Result<()> {
        let ConvShape {
            in_channels,
            out_channels,
            kernel,
            height,
            width,
            stride,
            pad,
        } = *self;
        if in_channels == 0 || out_channels == 0 || height == 0 || width == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!("degenerate conv shape {self:?}")));
        }
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {kernel}")));
        }
        if pad >= kernel {
            return Err(Error::InvalidArgument(format!(
                "padding {pad} must be smaller than kernel {kernel}"
            )));
        }
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::InvalidArgument(format!(
                "{kernel}x{kernel} kernel does not fit a padded {height}x{width} input"
            )));
        }
        Ok(())
    }
}

impl SpectralConvLayer {
    /// He-normal weights, zero bias.
    pub fn new(name: impl Into<String>, shape: ConvShape, mask: MaskInit, rng: &mut Rng) -> Result<Self> {
        shape.validate()?;
        let ConvShape {
            in_channels,
            out_channels,
            kernel,
            ..
        } = shape;
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weights = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| normal.sample(rng) as Real)
            .collect();
        let (p, q) = shape.padded();
        let mask_params = if mask.enabled {
            init_mask(p, q, mask.mean, mask.variance, mask.seed)?
        } else {
            MaskParams::constant(p, q, 1.0)
        };
        Self::from_parts(name, shape, weights, vec![0.0; out_channels], mask_params, mask.enabled)
    }

    pub fn from_parts(
        name: impl Into<String>,
        shape: ConvShape,
        weights: Vec<Real>,
        bias: Vec<Real>,
        mask: MaskParams,
        mask_trainable: bool,
    ) -> Result<Self> {
        shape.validate()?;
        let k = shape.kernel;
        if weights.len() != shape.out_channels * shape.in_channels * k * k {
            return Err(Error::ShapeMismatch(format!(
                "conv weights: expected {}x{}x{k}x{k}, got {} values",
                shape.out_channels,
                shape.in_channels,
                weights.len()
            )));
        }
        if bias.len() != shape.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv bias: expected {}, got {}",
                shape.out_channels,
                bias.len()
            )));
        }
        let (p, q) = shape.padded();
        if mask.height != p || mask.width != q {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, layer spectrum is {p}x{q}",
                mask.height, mask.width
            )));
        }
        Ok(SpectralConvLayer {
            name: name.into(),
            in_channels: shape.in_channels,
            out_channels: shape.out_channels,
            kernel: k,
            height: shape.height,
            width: shape.width,
            stride: shape.stride,
            pad: shape.pad,
            weights,
            bias,
            mask,
            mask_trainable,
            hooks: MaskHooks::default(),
            fft: Fft2::new(p, q)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> ConvShape {
        ConvShape {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            height: self.height,
            width: self.width,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn weights(&self) -> &[Real] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Real] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[Real] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [Real] {
        &mut self.bias
    }

    pub fn mask(&self) -> &MaskParams {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut MaskParams {
        &mut self.mask
    }

    pub fn mask_trainable(&self) -> bool {
        self.mask_trainable
    }

    pub fn padded(&self) -> (usize, usize) {
        (self.fft.rows(), self.fft.cols())
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.shape().output()
    }

    /// Spectra of the zero-padded kernels, `[out][in][P*Q]`.
    fn kernel_spectra(&self) -> Vec<Complex64> {
        let k = self.kernel;
        let q = self.fft.cols();
        let pq = self.fft.len();
        let mut out = vec![Complex64::new(0.0, 0.0); self.out_channels * self.in_channels * pq];
        out.par_chunks_mut(pq).enumerate().for_each(|(oi, buf)| {
            let w = &self.weights[oi * k * k..(oi + 1) * k * k];
            for a in 0..k {
                for b in 0..k {
                    buf[a * q + b] = Complex64::new(f64::from(w[a * k + b]), 0.0);
                }
            }
            self.fft.forward(buf);
        });
        out
    }

    fn forward_gate(&self) -> Vec<f64> {
        match self.hooks.forward {
            ForwardMask::Binarized => binarize(&self.mask).to_reals(),
            ForwardMask::Identity => self.mask.values.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Intermediate values of one forward call.
#[derive(Debug, Clone)]
pub struct LayerCache {
    batch: usize,
    /// `[n][in][P*Q]`
    input_spectra: Vec<Complex64>,
    /// Pre-mask spectra `[n][out][P*Q]`.
    pre_mask: Vec<Complex64>,
    /// Gate used in the forward pass (binarized, possibly randomly dropped).
    gate: Vec<f64>,
    /// `[out][in][P*Q]`
    kernel_spectra: Vec<Complex64>,
    max_imag_residue: f64,
}

impl LayerCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn gate(&self) -> &[f64] {
        &self.gate
    }

    /// Pre-mask spectrum `S` for one sample and output channel.
    pub fn pre_mask_spectrum(&self, n: usize, o: usize, out_channels: usize) -> &[Complex64] {
        let pq = self.gate.len();
        let start = (n * out_channels + o) * pq;
        &self.pre_mask[start..start + pq]
    }

    /// Largest imaginary component left after the inverse transform.
    pub fn max_imag_residue(&self) -> f64 {
        self.max_imag_residue
    }
}

/// Gradients of one backward call. `dmask` is real-valued and `None` for
/// frozen masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dweights: Vec<Real>,
    pub dbias: Vec<Real>,
    pub dmask: Option<Vec<Real>>,
}

/// Random-drop ablation applied to the binarized gate during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropSpec {
    pub p: f64,
    pub seed: u64,
}

pub fn forward(x: &Tensor, layer: &SpectralConvLayer) -> Result<(Tensor, LayerCache)> {
    forward_with_drop(x, layer, None)
}

/// Forward pass; `drop` zeroes random surviving bins of the binarized gate.
pub fn forward_with_drop(
    x: &Tensor,
    layer: &SpectralConvLayer,
    drop: Option<DropSpec>,
) -> Result<(Tensor, LayerCache)> {
    x.expect_rank(4, &layer.name)?;
    let s = x.shape();
    if s[1] != layer.in_channels || s[2] != layer.height || s[3] != layer.width {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected [N, {}, {}, {}] input, got {:?}",
            layer.name, layer.in_channels, layer.height, layer.width, s
        )));
    }
    let n_batch = s[0];
    let (cin, cout, k) = (layer.in_channels, layer.out_channels, layer.kernel);
    let (h, w) = (layer.height, layer.width);
    let (q, pq) = (layer.fft.cols(), layer.fft.len());
    let shape = layer.shape();
    let (ho, wo) = shape.output();
    let off = k - 1 - layer.pad;
    let stride = layer.stride;
    let scale = (pq as f64).sqrt();

    let mut gate = layer.forward_gate();
    if let (Some(d), ForwardMask::Binarized) = (drop, layer.hooks.forward) {
        if d.p > 0.0 {
            let bits = BinaryMask {
                height: layer.mask.height,
                width: layer.mask.width,
                bits: gate.iter().map(|&g| g != 0.0).collect(),
            };
            gate = random_drop(&bits, d.p, d.seed)?.to_reals();
        }
    }
    let kspec = layer.kernel_spectra();

    let per_sample: Vec<(Vec<Real>, Vec<Complex64>, Vec<Complex64>, f64)> = (0..n_batch)
        .into_par_iter()
        .map(|n| {
            let item = x.item(n);
            let mut xs = vec![Complex64::new(0.0, 0.0); cin * pq];
            for (i, buf) in xs.chunks_mut(pq).enumerate() {
                let plane = &item[i * h * w..(i + 1) * h * w];
                for a in 0..h {
                    for b in 0..w {
                        buf[(a + k - 1) * q + b + k - 1] = Complex64::new(f64::from(plane[a * w + b]), 0.0);
                    }
                }
                layer.fft.forward(buf);
            }
            let mut pre = vec![Complex64::new(0.0, 0.0); cout * pq];
            let mut y = vec![0.0 as Real; cout * ho * wo];
            let mut residue = 0.0f64;
            let mut z = vec![Complex64::new(0.0, 0.0); pq];
            for o in 0..cout {
                let so = &mut pre[o * pq..(o + 1) * pq];
                for i in 0..cin {
                    let xi = &xs[i * pq..(i + 1) * pq];
                    let ki = &kspec[(o * cin + i) * pq..(o * cin + i + 1) * pq];
                    for ((acc, a), b) in so.iter_mut().zip(xi).zip(ki) {
                        *acc += a * b.conj();
                    }
                }
                for (acc, (zz, g)) in so.iter_mut().zip(z.iter_mut().zip(&gate)) {
                    *acc *= scale;
                    *zz = *acc * *g;
                }
                layer.fft.inverse(&mut z);
                residue = z.iter().fold(residue, |m, c| m.max(c.im.abs()));
                let bias = f64::from(layer.bias[o]);
                let yo = &mut y[o * ho * wo..(o + 1) * ho * wo];
                for a in 0..ho {
                    for b in 0..wo {
                        let idx = (a * stride + off) * q + b * stride + off;
                        yo[a * wo + b] = (z[idx].re + bias) as Real;
                    }
                }
            }
            (y, xs, pre, residue)
        })
        .collect();

    let mut y = Vec::with_capacity(n_batch * cout * ho * wo);
    let mut input_spectra = Vec::with_capacity(n_batch * cin * pq);
    let mut pre_mask = Vec::with_capacity(n_batch * cout * pq);
    let mut max_imag_residue = 0.0f64;
    for (yi, xs, pre, r) in per_sample {
        y.extend_from_slice(&yi);
        input_spectra.extend_from_slice(&xs);
        pre_mask.extend_from_slice(&pre);
        max_imag_residue = max_imag_residue.max(r);
    }
    let out = Tensor::from_vec(&[n_batch, cout, ho, wo], y)?;
    Ok((
        out,
        LayerCache {
            batch: n_batch,
            input_spectra,
            pre_mask,
            gate,
            kernel_spectra: kspec,
            max_imag_residue,
        },
    ))
}

/// Backward pass through the layer given the cache of the matching forward.
pub fn backward(cache: &LayerCache, dy: &Tensor, layer: &SpectralConvLayer) -> Result<ConvGrads> {
    let (cin, cout, k) = (layer.in_channels, layer.out_channels, layer.kernel);
    let (h, w) = (layer.height, layer.width);
    let (q, pq) = (layer.fft.cols(), layer.fft.len());
    let (ho, wo) = layer.output_shape();
    let n_batch = cache.batch;
    if dy.shape() != [n_batch, cout, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "{}: gradient shape {:?} does not match output [{n_batch}, {cout}, {ho}, {wo}]",
            layer.name,
            dy.shape()
        )));
    }
    if cache.gate.len() != pq || cache.kernel_spectra.len() != cout * cin * pq {
        return Err(Error::ShapeMismatch(format!(
            "{}: cache was produced by a different layer shape",
            layer.name
        )));
    }
    let off = k - 1 - layer.pad;
    let stride = layer.stride;
    let scale = (pq as f64).sqrt();
    let want_dmask = layer.mask_trainable;
    let back_gate: Vec<f64> = match layer.hooks.backward {
        BackwardMask::Forward => cache.gate.clone(),
        BackwardMask::Continuous => layer.mask.values.iter().map(|&v| f64::from(v)).collect(),
    };

    // Per sample: masked output-spectrum gradient, input gradient, mask gradient.
    let per_sample: Vec<(Vec<Complex64>, Vec<Real>, Vec<f64>)> = (0..n_batch)
        .into_par_iter()
        .map(|n| {
            let dyn_ = dy.item(n);
            let mut ghat = vec![Complex64::new(0.0, 0.0); cout * pq];
            let mut dm = if want_dmask { vec![0.0f64; pq] } else { Vec::new() };
            for o in 0..cout {
                let buf = &mut ghat[o * pq..(o + 1) * pq];
                let go = &dyn_[o * ho * wo..(o + 1) * ho * wo];
                for a in 0..ho {
                    for b in 0..wo {
                        let idx = (a * stride + off) * q + b * stride + off;
                        buf[idx] = Complex64::new(f64::from(go[a * wo + b]), 0.0);
                    }
                }
                layer.fft.forward(buf);
                if want_dmask {
                    let s = &cache.pre_mask[(n * cout + o) * pq..(n * cout + o + 1) * pq];
                    for ((acc, d), sv) in dm.iter_mut().zip(buf.iter()).zip(s) {
                        *acc += (d * sv.conj()).re;
                    }
                }
                for (d, g) in buf.iter_mut().zip(&back_gate) {
                    *d *= *g;
                }
            }
            let mut dx = vec![0.0 as Real; cin * h * w];
            let mut acc = vec![Complex64::new(0.0, 0.0); pq];
            for i in 0..cin {
                acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                for o in 0..cout {
                    let g = &ghat[o * pq..(o + 1) * pq];
                    let ks = &cache.kernel_spectra[(o * cin + i) * pq..(o * cin + i + 1) * pq];
                    for ((a, gv), kv) in acc.iter_mut().zip(g).zip(ks) {
                        *a += gv * kv;
                    }
                }
                acc.iter_mut().for_each(|v| *v *= scale);
                layer.fft.inverse(&mut acc);
                let dxi = &mut dx[i * h * w..(i + 1) * h * w];
                for a in 0..h {
                    for b in 0..w {
                        dxi[a * w + b] = acc[(a + k - 1) * q + b + k - 1].re as Real;
                    }
                }
            }
            (ghat, dx, dm)
        })
        .collect();

    // Weight gradients: one inverse transform per channel pair, batch summed
    // in sample order.
    let mut dweights = vec![0.0 as Real; cout * cin * k * k];
    dweights.par_chunks_mut(k * k).enumerate().for_each(|(oi, dk)| {
        let (o, i) = (oi / cin, oi % cin);
        let mut c = vec![Complex64::new(0.0, 0.0); pq];
        for (n, (ghat, _, _)) in per_sample.iter().enumerate() {
            let xs = &cache.input_spectra[(n * cin + i) * pq..(n * cin + i + 1) * pq];
            let g = &ghat[o * pq..(o + 1) * pq];
            for ((acc, xv), gv) in c.iter_mut().zip(xs).zip(g) {
                *acc += xv * gv.conj();
            }
        }
        c.iter_mut().for_each(|v| *v *= scale);
        layer.fft.inverse(&mut c);
        for a in 0..k {
            for b in 0..k {
                dk[a * k + b] = c[a * q + b].re as Real;
            }
        }
    });

    let mut dbias = vec![0.0 as Real; cout];
    for n in 0..n_batch {
        let item = dy.item(n);
        for (o, db) in dbias.iter_mut().enumerate() {
            let s: f64 = item[o * ho * wo..(o + 1) * ho * wo].iter().map(|&v| f64::from(v)).sum();
            *db += s as Real;
        }
    }

    let mut dx = Vec::with_capacity(n_batch * cin * h * w);
    let mut dmask_acc = if want_dmask { vec![0.0f64; pq] } else { Vec::new() };
    for (_, dxi, dm) in &per_sample {
        dx.extend_from_slice(dxi);
        for (a, v) in dmask_acc.iter_mut().zip(dm) {
            *a += v;
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_vec(&[n_batch, cin, h, w], dx)?,
        dweights,
        dbias,
        dmask: want_dmask.then(|| dmask_acc.into_iter().map(|v| v as Real).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn layer(shape: ConvShape, mask: MaskInit, seed: u64) -> SpectralConvLayer {
        SpectralConvLayer::new("t", shape, mask, &mut rng(seed)).unwrap()
    }

    fn naive_dft(x: &[Complex64], m: usize, n: usize, sign: f64) -> Vec<Complex64> {
        let scale = 1.0 / ((m * n) as f64).sqrt();
        let mut out = vec![Complex64::new(0.0, 0.0); m * n];
        for h in 0..m {
            for w in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..m {
                    for b in 0..n {
                        let ph = sign * 2.0 * PI * ((a * h) as f64 / m as f64 + (b * w) as f64 / n as f64);
                        acc += x[a * n + b] * Complex64::from_polar(1.0, ph);
                    }
                }
                out[h * n + w] = acc * scale;
            }
        }
        out
    }

    #[test]
    fn init_mask_examples() {
        let m = init_mask(5, 7, 0.8, 0.0, 1).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.8 as Real));
        let m = init_mask(3, 3, 1.7, 0.0, 1).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));

        let m = init_mask(64, 64, 0.8, 0.2, 42).unwrap();
        assert!(m.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(m.hermitian_error() < 1e-7);
        assert_eq!(m, init_mask(64, 64, 0.8, 0.2, 42).unwrap());

        assert!(matches!(init_mask(3, 3, 0.5, -0.1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn init_mask_mean_matches_monte_carlo() {
        // Independent sampler: Box-Muller on a different generator, clipped.
        let mut r = rand::rngs::StdRng::seed_from_u64(2024);
        let std = 0.2f64.sqrt();
        let draws = 400_000;
        let mut clipped = Vec::with_capacity(draws);
        for _ in 0..draws {
            let u1: f64 = r.random::<f64>().max(1e-300);
            let u2: f64 = r.random();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
            clipped.push((0.8 + std * z).clamp(0.0, 1.0));
        }
        let oracle: f64 = clipped.iter().sum::<f64>() / draws as f64;
        // Symmetrization averages pairs, which leaves the expected mean unchanged.
        let m = init_mask(64, 64, 0.8, 0.2, 5).unwrap();
        let mean: f64 = m.values().iter().map(|&v| f64::from(v)).sum::<f64>() / 4096.0;
        assert!((mean - oracle).abs() < 0.02, "mean {mean} vs oracle {oracle}");
    }

    #[test]
    fn binarize_threshold() {
        let m = MaskParams::from_parts(1, 3, vec![0.7, 0.49, 0.5], vec![0.0; 3]).unwrap();
        assert_eq!(binarize(&m).bits(), &[true, false, true]);
    }

    #[test]
    fn update_mask_examples() {
        let mut m = init_mask(6, 5, 0.8, 0.2, 3).unwrap();
        let before = m.clone();
        update_mask(&mut m, &vec![0.0; 30], 0.1, 0.9).unwrap();
        assert_eq!(m, before);

        let mut m = MaskParams::from_parts(1, 1, vec![0.95], vec![0.0]).unwrap();
        update_mask(&mut m, &[-0.2], 1.0, 0.0).unwrap();
        assert_eq!(m.values(), &[1.0]);

        let mut m = init_mask(7, 6, 0.6, 0.1, 8).unwrap();
        let g: Vec<Real> = (0..42).map(|i| (i as Real * 0.37).sin()).collect();
        update_mask(&mut m, &g, 0.5, 0.9).unwrap();
        assert!(m.hermitian_error() < 1e-7);
        assert!(m.values().iter().all(|&v| (0.0..=1.0).contains(&v)));

        assert!(matches!(
            update_mask(&mut m, &[0.0; 3], 0.1, 0.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mask_percentage_examples() {
        let m = MaskParams::constant(4, 4, 0.5);
        assert_eq!(mask_percentage(&m), 0.0);
        let m = MaskParams::constant(4, 4, 0.49);
        assert_eq!(mask_percentage(&m), 1.0);
        let m = MaskParams::from_parts(1, 4, vec![0.1, 0.9, 0.2, 0.6], vec![0.0; 4]).unwrap();
        assert_eq!(mask_percentage(&m), 0.5);
    }

    #[test]
    fn random_drop_examples() {
        let ones = BinaryMask::new(100, 100, vec![true; 10_000]).unwrap();
        assert_eq!(random_drop(&ones, 0.0, 1).unwrap(), ones);
        assert_eq!(random_drop(&ones, 1.0, 1).unwrap().count_ones(), 0);
        assert!(matches!(random_drop(&ones, 1.5, 1), Err(Error::InvalidArgument(_))));

        // Binomial(10000, 0.8): sigma = sqrt(n p (1-p)) = 40.
        let kept = random_drop(&ones, 0.2, 77).unwrap().count_ones() as f64;
        assert!((kept - 8000.0).abs() < 3.0 * 40.0, "kept {kept}");

        let mixed = BinaryMask::new(2, 2, vec![false, true, false, true]).unwrap();
        let d = random_drop(&mixed, 0.5, 3).unwrap();
        assert!(!d.bits()[0] && !d.bits()[2]);
        assert_eq!(d, random_drop(&mixed, 0.5, 3).unwrap());
    }

    #[test]
    fn delta_kernel_is_identity() {
        let shape = ConvShape::same(1, 1, 3, 6, 5);
        let mut l = layer(shape, MaskInit::disabled(), 1);
        l.weights_mut().iter_mut().for_each(|v| *v = 0.0);
        l.weights_mut()[4] = 1.0;
        l.bias_mut()[0] = 0.25;
        let x = random_tensor(&[2, 1, 6, 5], 2);
        let (y, cache) = forward(&x, &l).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (b + 0.25)).abs() < 1e-5);
        }
        assert!(cache.max_imag_residue() < 1e-5);
    }

    #[test]
    fn zero_mask_leaves_bias() {
        let shape = ConvShape::same(2, 3, 3, 5, 5);
        let mut l = layer(
            shape,
            MaskInit {
                enabled: true,
                mean: 0.0,
                variance: 0.0,
                seed: 0,
            },
            4,
        );
        l.bias_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        assert_eq!(mask_percentage(l.mask()), 1.0);
        let (y, _) = forward(&random_tensor(&[2, 2, 5, 5], 5), &l).unwrap();
        for n in 0..2 {
            for o in 0..3 {
                for v in &y.item(n)[o * 25..(o + 1) * 25] {
                    assert!((v - l.bias()[o]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn masked_forward_matches_effective_kernel_oracle() {
        let shape = ConvShape::same(1, 1, 3, 8, 8);
        let l = layer(
            shape,
            MaskInit {
                enabled: true,
                mean: 0.5,
                variance: 0.2,
                seed: 13,
            },
            6,
        );
        let gate = binarize(l.mask());
        assert!(gate.count_ones() > 0 && gate.count_ones() < 100);
        let x = random_tensor(&[1, 1, 8, 8], 7);
        let (y, _) = forward(&x, &l).unwrap();

        let (p, q) = (10usize, 10usize);
        // Effective kernel: inverse DFT of (mask * DFT(padded kernel)).
        let mut kp = vec![Complex64::new(0.0, 0.0); p * q];
        for a in 0..3 {
            for b in 0..3 {
                kp[a * q + b] = Complex64::new(f64::from(l.weights()[a * 3 + b]), 0.0);
            }
        }
        let mut kf = naive_dft(&kp, p, q, -1.0);
        for (v, &g) in kf.iter_mut().zip(gate.bits()) {
            if !g {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        let keff = naive_dft(&kf, p, q, 1.0);
        // Circular correlation of the embedded input with the effective kernel.
        let mut xp = vec![0.0f64; p * q];
        for a in 0..8 {
            for b in 0..8 {
                xp[(a + 2) * q + b + 2] = f64::from(x.data()[a * 8 + b]);
            }
        }
        let mut worst = 0.0f64;
        for a in 0..8 {
            for b in 0..8 {
                let (n0, n1) = (a + 1, b + 1);
                let mut acc = Complex64::new(0.0, 0.0);
                for m0 in 0..p {
                    for m1 in 0..q {
                        acc += keff[m0 * q + m1] * xp[((n0 + m0) % p) * q + (n1 + m1) % q];
                    }
                }
                worst = worst.max((acc.re - f64::from(y.data()[a * 8 + b])).abs());
            }
        }
        assert!(worst < 1e-4, "max abs error {worst}");
    }

    #[test]
    fn stride_subsamples_same_output() {
        let s1 = ConvShape::same(2, 2, 3, 7, 6);
        let s2 = ConvShape { stride: 2, ..s1 };
        let l1 = layer(s1, MaskInit::disabled(), 9);
        let l2 = SpectralConvLayer::from_parts(
            "s2",
            s2,
            l1.weights().to_vec(),
            l1.bias().to_vec(),
            l1.mask().clone(),
            false,
        )
        .unwrap();
        assert_eq!(l2.output_shape(), (4, 3));
        let x = random_tensor(&[1, 2, 7, 6], 10);
        let (y1, _) = forward(&x, &l1).unwrap();
        let (y2, _) = forward(&x, &l2).unwrap();
        for o in 0..2 {
            for a in 0..4 {
                for b in 0..3 {
                    let v1 = y1.data()[o * 42 + 2 * a * 6 + 2 * b];
                    let v2 = y2.data()[o * 12 + a * 3 + b];
                    assert!((v1 - v2).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_gradient_gives_zero_grads() {
        let l = layer(
            ConvShape::same(2, 3, 3, 5, 4),
            MaskInit {
                enabled: true,
                mean: 0.8,
                variance: 0.2,
                seed: 1,
            },
            11,
        );
        let x = random_tensor(&[2, 2, 5, 4], 12);
        let (y, cache) = forward(&x, &l).unwrap();
        let g = backward(&cache, &Tensor::zeros(y.shape()), &l).unwrap();
        assert!(g.dx.data().iter().all(|&v| v == 0.0));
        assert!(g.dweights.iter().all(|&v| v == 0.0));
        assert!(g.dbias.iter().all(|&v| v == 0.0));
        assert!(g.dmask.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let l = layer(ConvShape::same(2, 1, 3, 4, 4), MaskInit::disabled(), 1);
        assert!(matches!(
            forward(&Tensor::zeros(&[1, 3, 4, 4]), &l),
            Err(Error::ShapeMismatch(_))
        ));
        let (_, cache) = forward(&Tensor::zeros(&[1, 2, 4, 4]), &l).unwrap();
        assert!(matches!(
            backward(&cache, &Tensor::zeros(&[2, 1, 4, 4]), &l),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(SpectralConvLayer::new(
            "even",
            ConvShape::same(1, 1, 4, 4, 4),
            MaskInit::disabled(),
            &mut rng(0)
        )
        .is_err());
    }

    /// `0.5 * ||y||^2` in f64.
    fn half_sq(y: &Tensor) -> f64 {
        0.5 * y.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>()
    }

    /// Max-norm relative error between two gradient vectors.
    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    fn central_diff(values: &mut dyn FnMut(usize, Real) -> f64, len: usize, base: &[Real]) -> Vec<f64> {
        let h: Real = 1e-3;
        (0..len)
            .map(|i| {
                let plus = values(i, base[i] + h);
                let minus = values(i, base[i] - h);
                values(i, base[i]);
                (plus - minus) / (2.0 * f64::from(h))
            })
            .collect()
    }

    #[cfg(not(feature = "f64"))]
    const TOL: f64 = 1e-3;
    #[cfg(feature = "f64")]
    const TOL: f64 = 1e-6;

    fn check_layer_gradients(forward_mode: ForwardMask, check_mask: bool) {
        let shape = ConvShape {
            stride: 1,
            ..ConvShape::same(2, 2, 3, 5, 5)
        };
        let mut l = layer(
            shape,
            MaskInit {
                enabled: true,
                mean: 0.6,
                variance: 0.1,
                seed: 21,
            },
            22,
        );
        l.hooks.forward = forward_mode;
        l.bias_mut().copy_from_slice(&[0.1, -0.2]);
        let x = random_tensor(&[2, 2, 5, 5], 23);
        let (y, cache) = forward(&x, &l).unwrap();
        let g = backward(&cache, &y, &l).unwrap();

        let mut lx = l.clone();
        let xbase = x.data().to_vec();
        let mut xv = x.clone();
        let fd = central_diff(
            &mut |i, v| {
                xv.data_mut()[i] = v;
                half_sq(&forward(&xv, &lx).unwrap().0)
            },
            xbase.len(),
            &xbase,
        );
        let an: Vec<f64> = g.dx.data().iter().map(|&v| f64::from(v)).collect();
        assert!(rel_err(&an, &fd) < TOL, "dx rel err {}", rel_err(&an, &fd));

        let wbase = l.weights().to_vec();
        let fd = central_diff(
            &mut |i, v| {
                lx.weights_mut()[i] = v;
                half_sq(&forward(&x, &lx).unwrap().0)
            },
            wbase.len(),
            &wbase,
        );
        let an: Vec<f64> = g.dweights.iter().map(|&v| f64::from(v)).collect();
        assert!(rel_err(&an, &fd) < TOL, "dW rel err {}", rel_err(&an, &fd));

        let bbase = l.bias().to_vec();
        let fd = central_diff(
            &mut |i, v| {
                lx.bias_mut()[i] = v;
                half_sq(&forward(&x, &lx).unwrap().0)
            },
            2,
            &bbase,
        );
        let an: Vec<f64> = g.dbias.iter().map(|&v| f64::from(v)).collect();
        assert!(rel_err(&an, &fd) < TOL, "dbias rel err {}", rel_err(&an, &fd));

        if check_mask {
            let mbase = l.mask().values().to_vec();
            let fd = central_diff(
                &mut |i, v| {
                    lx.mask_mut().values_mut()[i] = v;
                    half_sq(&forward(&x, &lx).unwrap().0)
                },
                mbase.len(),
                &mbase,
            );
            let an: Vec<f64> = g.dmask.unwrap().iter().map(|&v| f64::from(v)).collect();
            assert!(rel_err(&an, &fd) < TOL, "dM rel err {}", rel_err(&an, &fd));
        }
    }

    #[test]
    fn gradients_match_finite_differences_without_binarization() {
        check_layer_gradients(ForwardMask::Identity, true);
    }

    #[test]
    fn gradients_match_finite_differences_with_fixed_binarized_mask() {
        // Perturbations of x and W never move the mask, so the gate is constant.
        check_layer_gradients(ForwardMask::Binarized, false);
    }

    #[test]
    fn mask_gradient_is_hermitian_symmetric() {
        let l = layer(
            ConvShape::same(2, 2, 3, 6, 6),
            MaskInit {
                enabled: true,
                mean: 0.8,
                variance: 0.2,
                seed: 2,
            },
            3,
        );
        let x = random_tensor(&[3, 2, 6, 6], 4);
        let (y, cache) = forward(&x, &l).unwrap();
        let dm = backward(&cache, &y, &l).unwrap().dmask.unwrap();
        let m = MaskParams::from_parts(8, 8, dm, vec![0.0; 64]).unwrap();
        let scale = m.values().iter().fold(0.0 as Real, |a, v| a.max(v.abs()));
        assert!(m.hermitian_error() < 1e-5 * f64::from(scale));
    }

    #[test]
    fn continuous_backward_hook_changes_only_gated_gradients() {
        let mut l = layer(
            ConvShape::same(1, 1, 3, 6, 6),
            MaskInit {
                enabled: true,
                mean: 0.7,
                variance: 0.05,
                seed: 2,
            },
            3,
        );
        let x = random_tensor(&[1, 1, 6, 6], 4);
        let (y, cache) = forward(&x, &l).unwrap();
        let ste = backward(&cache, &y, &l).unwrap();
        l.hooks.backward = BackwardMask::Continuous;
        let cont = backward(&cache, &y, &l).unwrap();
        assert_eq!(ste.dmask, cont.dmask);
        assert_eq!(ste.dbias, cont.dbias);
        assert_ne!(ste.dweights, cont.dweights);
    }
}
