//! Unitary 2D discrete Fourier transforms and plane plumbing.
//!
//! Both directions carry a `1/sqrt(M*N)` factor, so `idft2(dft2(x)) == x`
//! and Parseval holds without extra scaling. Any factor needed to make the
//! convolution theorem exact belongs to the caller.
//!
//! All arithmetic is done in `f64`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

/// A real `height x width` plane stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealPlane {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl RealPlane {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "plane must be at least 1x1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} plane needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("plane values must be finite".into()));
        }
        Ok(RealPlane { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RealPlane {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// A complex `height x width` spectrum stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum2D {
    height: usize,
    width: usize,
    values: Vec<Complex64>,
}

impl Spectrum2D {
    pub fn new(height: usize, width: usize, values: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "spectrum must be at least 1x1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} spectrum needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Spectrum2D { height, width, values })
    }

    pub fn from_real(x: &RealPlane) -> Self {
        Spectrum2D {
            height: x.height,
            width: x.width,
            values: x.values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> Complex64 {
        self.values[h * self.width + w]
    }

    /// Real parts as a plane.
    pub fn re(&self) -> RealPlane {
        RealPlane {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|c| c.re).collect(),
        }
    }

    pub fn max_abs_im(&self) -> f64 {
        self.values.iter().fold(0.0, |m, c| m.max(c.im.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Largest deviation from `X[h][w] == conj(X[-h][-w])`.
    pub fn hermitian_error(&self) -> f64 {
        let (m, n) = (self.height, self.width);
        let mut worst = 0.0f64;
        for h in 0..m {
            for w in 0..n {
                let a = self.values[h * n + w];
                let b = self.values[((m - h) % m) * n + (n - w) % n].conj();
                worst = worst.max((a - b).norm());
            }
        }
        worst
    }
}

/// Reusable unitary 2D FFT for one `rows x cols` size.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "transform size must be at least 1x1, got {rows}x{cols}"
            )));
        }
        let mut planner = FftPlanner::<f64>::new();
        Ok(Fft2 {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
            scale: 1.0 / ((rows * cols) as f64).sqrt(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place unitary forward transform of a row-major buffer.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// In-place unitary inverse transform of a row-major buffer.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }

    fn run(&self, buf: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        assert_eq!(buf.len(), self.len(), "Fft2 buffer length");
        let (r, c) = (self.rows, self.cols);
        if c > 1 {
            row.process(buf);
        }
        if r > 1 {
            let mut t = vec![Complex64::new(0.0, 0.0); r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = buf[i * c + j];
                }
            }
            col.process(&mut t);
            for j in 0..c {
                for i in 0..r {
                    buf[i * c + j] = t[j * r + i];
                }
            }
        }
        for v in buf.iter_mut() {
            *v *= self.scale;
        }
    }
}

/// Unitary forward 2D DFT of a complex spectrum/plane.
pub fn dft2(x: &Spectrum2D) -> Result<Spectrum2D> {
    let plan = Fft2::new(x.height, x.width)?;
    let mut values = x.values.clone();
    plan.forward(&mut values);
    Spectrum2D::new(x.height, x.width, values)
}

/// Unitary forward 2D DFT of a real plane.
pub fn dft2_real(x: &RealPlane) -> Result<Spectrum2D> {
    dft2(&Spectrum2D::from_real(x))
}

/// Unitary inverse 2D DFT.
pub fn idft2(s: &Spectrum2D) -> Result<Spectrum2D> {
    let plan = Fft2::new(s.height, s.width)?;
    let mut values = s.values.clone();
    plan.inverse(&mut values);
    Spectrum2D::new(s.height, s.width, values)
}

/// Elementwise complex product.
pub fn cmul(a: &Spectrum2D, b: &Spectrum2D) -> Result<Spectrum2D> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "cmul of {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let values = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
    Spectrum2D::new(a.height, a.width, values)
}

/// Place `x` in the top-left corner of a zero `target_m x target_n` plane.
pub fn zero_pad(x: &RealPlane, target_m: usize, target_n: usize) -> Result<RealPlane> {
    embed(x, target_m, target_n, 0, 0)
}

/// Place `x` at `(offset_m, offset_n)` inside a zero `target_m x target_n` plane.
pub fn embed(x: &RealPlane, target_m: usize, target_n: usize, offset_m: usize, offset_n: usize) -> Result<RealPlane> {
    if x.height + offset_m > target_m || x.width + offset_n > target_n {
        return Err(Error::Dimension(format!(
            "cannot place {}x{} at ({offset_m},{offset_n}) inside {target_m}x{target_n}",
            x.height, x.width
        )));
    }
    let mut out = RealPlane::zeros(target_m, target_n);
    for h in 0..x.height {
        let dst = (h + offset_m) * target_n + offset_n;
        out.values[dst..dst + x.width].copy_from_slice(&x.values[h * x.width..(h + 1) * x.width]);
    }
    Ok(out)
}

/// Extract the `out_m x out_n` window starting at `(offset_m, offset_n)`.
pub fn crop_same(y: &RealPlane, out_m: usize, out_n: usize, offset_m: usize, offset_n: usize) -> Result<RealPlane> {
    if out_m == 0 || out_n == 0 {
        return Err(Error::Dimension("crop window must be at least 1x1".into()));
    }
    if offset_m + out_m > y.height || offset_n + out_n > y.width {
        return Err(Error::Dimension(format!(
            "{out_m}x{out_n} window at ({offset_m},{offset_n}) exceeds {}x{} plane",
            y.height, y.width
        )));
    }
    let mut values = Vec::with_capacity(out_m * out_n);
    for h in 0..out_m {
        let src = (h + offset_m) * y.width + offset_n;
        values.extend_from_slice(&y.values[src..src + out_n]);
    }
    Ok(RealPlane {
        height: out_m,
        width: out_n,
        values,
    })
}
