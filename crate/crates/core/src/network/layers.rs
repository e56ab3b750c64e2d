//! Non-spectral layers and the loss. Each forward returns whatever its
//! adjoint needs; nothing here holds hidden state except batch-norm running
//! statistics.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::{self, Rng};
use crate::{Error, Real, Result, Tensor};

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Gradient of [`relu`] given its input.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relu: input {:?} vs gradient {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    kind: PoolKind,
    in_shape: Vec<usize>,
    /// Flat input index of each output's maximum (max pooling only).
    argmax: Vec<usize>,
}

/// 2x2 window, stride 2, over NCHW input with even spatial dims.
pub fn pool2x2(x: &Tensor, kind: PoolKind) -> Result<(Tensor, PoolCache)> {
    x.expect_rank(4, "pool")?;
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "2x2 pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![0.0 as Real; n * c * ho * wo];
    let mut argmax = if kind == PoolKind::Max {
        vec![0usize; y.len()]
    } else {
        Vec::new()
    };
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for a in 0..ho {
            for b in 0..wo {
                let idx = [
                    base + 2 * a * w + 2 * b,
                    base + 2 * a * w + 2 * b + 1,
                    base + (2 * a + 1) * w + 2 * b,
                    base + (2 * a + 1) * w + 2 * b + 1,
                ];
                let o = plane * ho * wo + a * wo + b;
                match kind {
                    PoolKind::Max => {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                        y[o] = xd[best];
                        argmax[o] = best;
                    }
                    PoolKind::Avg => {
                        let s: f64 = idx.iter().map(|&i| f64::from(xd[i])).sum();
                        y[o] = (s / 4.0) as Real;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, ho, wo], y)?,
        PoolCache {
            kind,
            in_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn pool2x2_backward(cache: &PoolCache, dy: &Tensor) -> Result<Tensor> {
    let s = &cache.in_shape;
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    if dy.shape() != [n, c, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "pool backward: gradient {:?}, expected [{n}, {c}, {ho}, {wo}]",
            dy.shape()
        )));
    }
    let mut dx = Tensor::zeros(s);
    let dxd = dx.data_mut();
    match cache.kind {
        PoolKind::Max => {
            for (o, &g) in dy.data().iter().enumerate() {
                dxd[cache.argmax[o]] += g;
            }
        }
        PoolKind::Avg => {
            for plane in 0..n * c {
                for a in 0..ho {
                    for b in 0..wo {
                        let g = dy.data()[plane * ho * wo + a * wo + b] / 4.0;
                        let base = plane * h * w;
                        dxd[base + 2 * a * w + 2 * b] = g;
                        dxd[base + 2 * a * w + 2 * b + 1] = g;
                        dxd[base + (2 * a + 1) * w + 2 * b] = g;
                        dxd[base + (2 * a + 1) * w + 2 * b + 1] = g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over each full plane: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.expect_rank(4, "global average pool")?;
    let s = x.shape();
    let hw = s[2] * s[3];
    let data = x
        .data()
        .chunks(hw)
        .map(|p| (p.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64) as Real)
        .collect();
    Tensor::from_vec(&[s[0], s[1]], data)
}

pub fn global_avg_pool_backward(in_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    if in_shape.len() != 4 || dy.shape() != [in_shape[0], in_shape[1]] {
        return Err(Error::ShapeMismatch(format!(
            "global average pool backward: gradient {:?} for input {in_shape:?}",
            dy.shape()
        )));
    }
    let hw = in_shape[2] * in_shape[3];
    let mut data = Vec::with_capacity(dy.len() * hw);
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g / hw as Real, hw));
    }
    Tensor::from_vec(in_shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization over `[N, C, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<Real>,
    pub beta: Vec<Real>,
    pub running_mean: Vec<Real>,
    pub running_var: Vec<Real>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub dx: Tensor,
    pub dgamma: Vec<Real>,
    pub dbeta: Vec<Real>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Train mode normalizes by batch statistics and updates the running
    /// estimates; eval mode uses the running estimates.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batch norm over {} channels got input {s:?}",
                self.channels()
            )));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if mode == Mode::Train && n < 2 {
            return Err(Error::InvalidArgument(
                "batch norm in train mode needs a batch of at least 2".into(),
            ));
        }
        let count = (n * inner) as f64;
        let xd = x.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        match mode {
            Mode::Train => {
                for ch in 0..c {
                    let mut sum = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        sum += xd[base..base + inner].iter().map(|&v| f64::from(v)).sum::<f64>();
                    }
                    let m = sum / count;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        sq += xd[base..base + inner]
                            .iter()
                            .map(|&v| (f64::from(v) - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                    let unbiased = if count > 1.0 { sq / (count - 1.0) } else { 0.0 };
                    let mo = self.momentum;
                    self.running_mean[ch] = ((1.0 - mo) * f64::from(self.running_mean[ch]) + mo * m) as Real;
                    self.running_var[ch] = ((1.0 - mo) * f64::from(self.running_var[ch]) + mo * unbiased) as Real;
                }
            }
            Mode::Eval => {
                for ch in 0..c {
                    mean[ch] = f64::from(self.running_mean[ch]);
                    var[ch] = f64::from(self.running_var[ch]);
                }
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0f64; xd.len()];
        let mut y = vec![0.0 as Real; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                let (g, bt) = (f64::from(self.gamma[ch]), f64::from(self.beta[ch]));
                for i in base..base + inner {
                    let h = (f64::from(xd[i]) - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = (h * g + bt) as Real;
                }
            }
        }
        Ok((
            Tensor::from_vec(s, y)?,
            BnCache {
                xhat,
                inv_std,
                shape: s.to_vec(),
                mode,
            },
        ))
    }

    pub fn backward(&self, cache: &BnCache, dy: &Tensor) -> Result<BnGrads> {
        if dy.shape() != cache.shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "batch norm backward: gradient {:?} vs input {:?}",
                dy.shape(),
                cache.shape
            )));
        }
        let (n, c) = (cache.shape[0], cache.shape[1]);
        let inner: usize = cache.shape[2..].iter().product();
        let count = (n * inner) as f64;
        let g = dy.data();
        let mut dgamma = vec![0.0 as Real; c];
        let mut dbeta = vec![0.0 as Real; c];
        let mut dx = vec![0.0 as Real; g.len()];
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
            for b in 0..n {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    sum_g += f64::from(g[i]);
                    sum_gx += f64::from(g[i]) * cache.xhat[i];
                }
            }
            dgamma[ch] = sum_gx as Real;
            dbeta[ch] = sum_g as Real;
            let k = f64::from(self.gamma[ch]) * cache.inv_std[ch];
            for b in 0..n {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let gi = f64::from(g[i]);
                    dx[i] = match cache.mode {
                        Mode::Train => k * (gi - sum_g / count - cache.xhat[i] * sum_gx / count),
                        Mode::Eval => k * gi,
                    } as Real;
                }
            }
        }
        Ok(BnGrads {
            dx: Tensor::from_vec(&cache.shape, dx)?,
            dgamma,
            dbeta,
        })
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<Real>,
    pub bias: Vec<Real>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub dx: Tensor,
    pub dweights: Vec<Real>,
    pub dbias: Vec<Real>,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| normal.sample(rng) as Real).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.inputs {
            return Err(Error::ShapeMismatch(format!(
                "dense layer expects [N, {}], got {:?}",
                self.inputs,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let mut y = vec![0.0 as Real; n * self.outputs];
        for b in 0..n {
            let xi = x.item(b);
            for o in 0..self.outputs {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let acc: f64 = row.iter().zip(xi).map(|(&w, &v)| f64::from(w) * f64::from(v)).sum();
                y[b * self.outputs + o] = (acc + f64::from(self.bias[o])) as Real;
            }
        }
        Tensor::from_vec(&[n, self.outputs], y)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<DenseGrads> {
        let n = x.shape()[0];
        if dy.shape() != [n, self.outputs] {
            return Err(Error::ShapeMismatch(format!(
                "dense backward: gradient {:?}, expected [{n}, {}]",
                dy.shape(),
                self.outputs
            )));
        }
        let mut dw = vec![0.0f64; self.weights.len()];
        let mut db = vec![0.0f64; self.outputs];
        let mut dx = vec![0.0 as Real; n * self.inputs];
        for b in 0..n {
            let xi = x.item(b);
            let gi = dy.item(b);
            let dxi = &mut dx[b * self.inputs..(b + 1) * self.inputs];
            let mut acc = vec![0.0f64; self.inputs];
            for o in 0..self.outputs {
                let g = f64::from(gi[o]);
                db[o] += g;
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let dwr = &mut dw[o * self.inputs..(o + 1) * self.inputs];
                for j in 0..self.inputs {
                    dwr[j] += g * f64::from(xi[j]);
                    acc[j] += g * f64::from(row[j]);
                }
            }
            for (d, a) in dxi.iter_mut().zip(acc) {
                *d = a as Real;
            }
        }
        Ok(DenseGrads {
            dx: Tensor::from_vec(&[n, self.inputs], dx)?,
            dweights: dw.into_iter().map(|v| v as Real).collect(),
            dbias: db.into_iter().map(|v| v as Real).collect(),
        })
    }
}

/// Inverted dropout: keeps each unit with probability `keep_prob` and scales
/// survivors by `1 / keep_prob`. Returns the output and the per-unit scale.
pub fn dropout(x: &Tensor, keep_prob: f64, seed: u64) -> Result<(Tensor, Vec<Real>)> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dropout keep probability must be in (0, 1], got {keep_prob}"
        )));
    }
    let mut r = rng::rng_for(seed, &[rng::tag::DROPOUT]);
    let scale = (1.0 / keep_prob) as Real;
    let gate: Vec<Real> = (0..x.len())
        .map(|_| if r.random_bool(keep_prob) { scale } else { 0.0 })
        .collect();
    let data = x.data().iter().zip(&gate).map(|(v, g)| v * g).collect();
    Ok((Tensor::from_vec(x.shape(), data)?, gate))
}

pub fn dropout_backward(gate: &[Real], dy: &Tensor) -> Result<Tensor> {
    if gate.len() != dy.len() {
        return Err(Error::ShapeMismatch("dropout backward: gate/gradient length".into()));
    }
    let data = dy.data().iter().zip(gate).map(|(g, m)| g * m).collect();
    Tensor::from_vec(dy.shape(), data)
}

/// Mean cross-entropy over the minibatch and its gradient with respect to
/// the logits (already divided by the batch size).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut loss = 0.0f64;
    let mut grad = vec![0.0 as Real; n * k];
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let z = logits.item(b);
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let exps: Vec<f64> = z.iter().map(|&v| (f64::from(v) - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() - (f64::from(z[label]) - max);
        for (j, e) in exps.iter().enumerate() {
            let p = e / total - if j == label { 1.0 } else { 0.0 };
            grad[b * k + j] = (p / n as f64) as Real;
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, k], grad)?))
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.item_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
