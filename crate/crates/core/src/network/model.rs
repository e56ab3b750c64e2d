use std::fmt;
use std::str::FromStr;

use crate::rng::{self, tag};
use crate::spectral_conv::{self, ConvShape, DropSpec, LayerCache, MaskHooks, MaskInit, SpectralConvLayer};
use crate::{Error, Real, Result, Tensor};

use super::layers::{self, BatchNorm, BnCache, Dense, Mode, PoolCache, PoolKind};

/// Architecture family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    /// conv(6,5x5)-pool-conv(16,5x5)-pool-dense(120)-dense(84)-dense(classes).
    LeNet,
    /// 3x3 stem, then `stages` stages of `blocks` two-conv residual blocks.
    ResNet {
        stages: usize,
        blocks: usize,
        widths: Vec<usize>,
    },
}

impl Arch {
    /// The canonical 3-stage CIFAR residual network with 20 weight layers.
    pub fn resnet20() -> Self {
        Arch::ResNet {
            stages: 3,
            blocks: 3,
            widths: vec![16, 32, 64],
        }
    }
}

/// Everything needed to rebuild a network with the same parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Channels, height, width.
    pub input: [usize; 3],
    pub classes: usize,
    pub mask_enabled: bool,
    /// Inverted dropout before each dense layer when set.
    pub dropout_keep: Option<f64>,
}

impl ModelSpec {
    pub fn cifar(arch: Arch, mask_enabled: bool) -> Self {
        ModelSpec {
            arch,
            input: [3, 32, 32],
            classes: 10,
            mask_enabled,
            dropout_keep: None,
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.arch {
            Arch::LeNet => write!(f, "arch=lenet")?,
            Arch::ResNet { stages, blocks, widths } => {
                let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                write!(f, "arch=resnet;stages={stages};blocks={blocks};widths={}", w.join(","))?
            }
        }
        let [c, h, w] = self.input;
        write!(
            f,
            ";input={c}x{h}x{w};classes={};mask={}",
            self.classes,
            if self.mask_enabled { "on" } else { "off" }
        )?;
        if let Some(k) = self.dropout_keep {
            write!(f, ";dropout={k}")?;
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("architecture descriptor `{s}`: {m}"));
        let mut arch = None;
        let (mut stages, mut blocks, mut widths) = (None, None, None);
        let (mut input, mut classes, mut mask, mut dropout) = (None, None, None, None);
        for part in s.split(';') {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(&format!("bad number `{v}`")));
            match k {
                "arch" => arch = Some(v.to_string()),
                "stages" => stages = Some(num(v)?),
                "blocks" => blocks = Some(num(v)?),
                "widths" => widths = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?),
                "input" => {
                    let d: Vec<usize> = v.split('x').map(num).collect::<Result<_>>()?;
                    if d.len() != 3 {
                        return Err(bad("input must be CxHxW"));
                    }
                    input = Some([d[0], d[1], d[2]]);
                }
                "classes" => classes = Some(num(v)?),
                "mask" => mask = Some(v == "on"),
                "dropout" => dropout = Some(v.parse::<f64>().map_err(|_| bad("bad dropout"))?),
                _ => return Err(bad(&format!("unknown key `{k}`"))),
            }
        }
        let arch = match arch.as_deref() {
            Some("lenet") => Arch::LeNet,
            Some("resnet") => Arch::ResNet {
                stages: stages.ok_or_else(|| bad("missing stages"))?,
                blocks: blocks.ok_or_else(|| bad("missing blocks"))?,
                widths: widths.ok_or_else(|| bad("missing widths"))?,
            },
            _ => return Err(bad("unknown arch")),
        };
        Ok(ModelSpec {
            arch,
            input: input.ok_or_else(|| bad("missing input"))?,
            classes: classes.ok_or_else(|| bad("missing classes"))?,
            mask_enabled: mask.ok_or_else(|| bad("missing mask"))?,
            dropout_keep: dropout,
        })
    }
}

/// Mask initialization shared by every conv of a built network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSettings {
    pub mean: f64,
    pub variance: f64,
}

impl Default for MaskSettings {
    /// From-scratch initialization: mean 0.8, variance 0.2.
    fn default() -> Self {
        MaskSettings {
            mean: 0.8,
            variance: 0.2,
        }
    }
}

/// Per-call forward options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardCtx {
    pub mode: Mode,
    /// Random-drop probability for binarized masks (train mode only).
    pub random_drop: f64,
    /// Seed for this step's stochastic layers.
    pub step_seed: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            random_drop: 0.0,
            step_seed: 0,
        }
    }

    pub fn train(step_seed: u64) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            random_drop: 0.0,
            step_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
    Mask,
}

pub enum ParamValue<'a> {
    Plain(&'a mut [Real]),
    Mask(&'a mut spectral_conv::MaskParams),
}

/// A trainable parameter and its latest gradient.
pub struct ParamSlot<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ParamValue<'a>,
    pub grad: Option<&'a [Real]>,
}

#[derive(Debug, Clone)]
struct ConvGradsStored {
    dweights: Vec<Real>,
    dbias: Vec<Real>,
    dmask: Option<Vec<Real>>,
}

#[derive(Debug, Clone)]
pub struct ConvNode {
    pub layer: SpectralConvLayer,
    slot: u64,
    cache: Option<LayerCache>,
    grads: Option<ConvGradsStored>,
}

impl ConvNode {
    pub fn new(layer: SpectralConvLayer, slot: u64) -> Self {
        ConvNode {
            layer,
            slot,
            cache: None,
            grads: None,
        }
    }

    fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let drop = (ctx.mode == Mode::Train && ctx.random_drop > 0.0).then(|| DropSpec {
            p: ctx.random_drop,
            seed: rng::derive_seed(ctx.step_seed, &[tag::RANDOM_DROP, self.slot]),
        });
        let (y, cache) = spectral_conv::forward_with_drop(x, &self.layer, drop)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(self.layer.name()))?;
        let g = spectral_conv::backward(&cache, dy, &self.layer)?;
        self.cache = Some(cache);
        self.grads = Some(ConvGradsStored {
            dweights: g.dweights,
            dbias: g.dbias,
            dmask: g.dmask,
        });
        Ok(g.dx)
    }

    /// Mask gradient from the latest backward call (real-valued).
    pub fn mask_grad(&self) -> Option<&[Real]> {
        self.grads.as_ref()?.dmask.as_deref()
    }

    pub fn cache(&self) -> Option<&LayerCache> {
        self.cache.as_ref()
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        let name = self.layer.name().to_string();
        let grads = self.grads.as_ref();
        f(ParamSlot {
            name: format!("{name}.weight"),
            kind: ParamKind::Weight,
            value: ParamValue::Plain(self.layer.weights_mut()),
            grad: grads.map(|g| g.dweights.as_slice()),
        });
        f(ParamSlot {
            name: format!("{name}.bias"),
            kind: ParamKind::Bias,
            value: ParamValue::Plain(self.layer.bias_mut()),
            grad: grads.map(|g| g.dbias.as_slice()),
        });
        if self.layer.mask_trainable() {
            f(ParamSlot {
                name: format!("{name}.mask"),
                kind: ParamKind::Mask,
                value: ParamValue::Mask(self.layer.mask_mut()),
                grad: grads.and_then(|g| g.dmask.as_deref()),
            });
        }
    }

    fn visit_tensors(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [Real])) {
        let name = self.layer.name().to_string();
        let s = self.layer.shape();
        let (p, q) = self.layer.padded();
        f(
            &format!("{name}.weight"),
            &[s.out_channels, s.in_channels, s.kernel, s.kernel],
            self.layer.weights_mut(),
        );
        f(&format!("{name}.bias"), &[s.out_channels], self.layer.bias_mut());
        let mask = self.layer.mask_mut();
        f(&format!("{name}.mask"), &[p, q], mask.values_mut());
        f(&format!("{name}.mask_momentum"), &[p, q], mask.momentum_mut());
    }
}

#[derive(Debug, Clone)]
pub struct BnNode {
    pub name: String,
    pub bn: BatchNorm,
    cache: Option<BnCache>,
    grads: Option<(Vec<Real>, Vec<Real>)>,
}

impl BnNode {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BnNode {
            name: name.into(),
            bn: BatchNorm::new(channels),
            cache: None,
            grads: None,
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (y, cache) = self.bn.forward(x, mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let g = self.bn.backward(cache, dy)?;
        self.grads = Some((g.dgamma, g.dbeta));
        Ok(g.dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        let grads = self.grads.as_ref();
        f(ParamSlot {
            name: format!("{}.gamma", self.name),
            kind: ParamKind::Scale,
            value: ParamValue::Plain(&mut self.bn.gamma),
            grad: grads.map(|g| g.0.as_slice()),
        });
        f(ParamSlot {
            name: format!("{}.beta", self.name),
            kind: ParamKind::Shift,
            value: ParamValue::Plain(&mut self.bn.beta),
            grad: grads.map(|g| g.1.as_slice()),
        });
    }

    fn visit_tensors(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [Real])) {
        let c = [self.bn.channels()];
        f(&format!("{}.gamma", self.name), &c, &mut self.bn.gamma);
        f(&format!("{}.beta", self.name), &c, &mut self.bn.beta);
        f(&format!("{}.running_mean", self.name), &c, &mut self.bn.running_mean);
        f(&format!("{}.running_var", self.name), &c, &mut self.bn.running_var);
    }
}

#[derive(Debug, Clone)]
pub struct DenseNode {
    pub name: String,
    pub dense: Dense,
    input: Option<Tensor>,
    grads: Option<(Vec<Real>, Vec<Real>)>,
}

impl DenseNode {
    pub fn new(name: impl Into<String>, dense: Dense) -> Self {
        DenseNode {
            name: name.into(),
            dense,
            input: None,
            grads: None,
        }
    }
}

/// Parameter-free shortcut: spatial subsampling plus zero channel padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Shortcut {
    stride: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Shortcut {
    fn front_pad(&self) -> usize {
        (self.out_channels - self.in_channels) / 2
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        let pad = self.front_pad();
        for b in 0..n {
            for ch in 0..c {
                for a in 0..ho {
                    for bb in 0..wo {
                        let v = x.data()[((b * c + ch) * h + a * self.stride) * w + bb * self.stride];
                        out.data_mut()[((b * self.out_channels + ch + pad) * ho + a) * wo + bb] = v;
                    }
                }
            }
        }
        out
    }

    fn backward(&self, in_shape: &[usize], dy: &Tensor) -> Tensor {
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
        let mut dx = Tensor::zeros(in_shape);
        let pad = self.front_pad();
        for b in 0..n {
            for ch in 0..c {
                for a in 0..ho {
                    for bb in 0..wo {
                        let g = dy.data()[((b * self.out_channels + ch + pad) * ho + a) * wo + bb];
                        dx.data_mut()[((b * c + ch) * h + a * self.stride) * w + bb * self.stride] = g;
                    }
                }
            }
        }
        dx
    }
}

/// Two-conv residual block with an unmasked identity path.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvNode,
    pub bn1: BnNode,
    pub conv2: ConvNode,
    pub bn2: BnNode,
    shortcut: Shortcut,
    in_shape: Option<Vec<usize>>,
    mid: Option<Tensor>,
    pre_out: Option<Tensor>,
}

impl ResidualBlock {
    fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = self.conv1.forward(x, ctx)?;
        let h = self.bn1.forward(&h, ctx.mode)?;
        let mid = layers::relu(&h);
        let h = self.conv2.forward(&mid, ctx)?;
        let mut h = self.bn2.forward(&h, ctx.mode)?;
        let s = self.shortcut.forward(x);
        if s.shape() != h.shape() {
            return Err(Error::ShapeMismatch(format!(
                "residual shortcut {:?} vs branch {:?}",
                s.shape(),
                h.shape()
            )));
        }
        for (a, b) in h.data_mut().iter_mut().zip(s.data()) {
            *a += *b;
        }
        let out = layers::relu(&h);
        self.in_shape = Some(x.shape().to_vec());
        // post-ReLU activations share the sign pattern needed by the adjoint
        self.mid = Some(mid);
        self.pre_out = Some(h);
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let name = self.conv1.layer.name().to_string();
        let pre_out = self.pre_out.as_ref().ok_or_else(|| missing_cache(&name))?;
        let d = layers::relu_backward(pre_out, dy)?;
        let d_branch = self.bn2.backward(&d)?;
        let d_branch = self.conv2.backward(&d_branch)?;
        let mid = self.mid.as_ref().ok_or_else(|| missing_cache(&name))?;
        let d_branch = layers::relu_backward(mid, &d_branch)?;
        let d_branch = self.bn1.backward(&d_branch)?;
        let mut dx = self.conv1.backward(&d_branch)?;
        let in_shape = self.in_shape.as_ref().ok_or_else(|| missing_cache(&name))?;
        let ds = self.shortcut.backward(in_shape, &d);
        for (a, b) in dx.data_mut().iter_mut().zip(ds.data()) {
            *a += *b;
        }
        Ok(dx)
    }
}

/// One node of a sequential network.
#[derive(Debug, Clone)]
pub enum Node {
    Conv(ConvNode),
    BatchNorm(BnNode),
    Relu {
        input: Option<Tensor>,
    },
    Pool {
        kind: PoolKind,
        cache: Option<PoolCache>,
    },
    GlobalAvgPool {
        in_shape: Option<Vec<usize>>,
    },
    Flatten {
        in_shape: Option<Vec<usize>>,
    },
    Dense(DenseNode),
    Dropout {
        keep_prob: f64,
        slot: u64,
        gate: Option<Vec<Real>>,
    },
    Residual(Box<ResidualBlock>),
}

impl Node {
    pub fn relu() -> Self {
        Node::Relu { input: None }
    }

    pub fn pool(kind: PoolKind) -> Self {
        Node::Pool { kind, cache: None }
    }

    pub fn global_avg_pool() -> Self {
        Node::GlobalAvgPool { in_shape: None }
    }

    pub fn flatten() -> Self {
        Node::Flatten { in_shape: None }
    }

    pub fn dropout(keep_prob: f64, slot: u64) -> Self {
        Node::Dropout {
            keep_prob,
            slot,
            gate: None,
        }
    }

    fn label(&self) -> String {
        match self {
            Node::Conv(c) => c.layer.name().to_string(),
            Node::BatchNorm(b) => b.name.clone(),
            Node::Dense(d) => d.name.clone(),
            Node::Residual(r) => r.conv1.layer.name().to_string(),
            Node::Relu { .. } => "relu".into(),
            Node::Pool { .. } => "pool".into(),
            Node::GlobalAvgPool { .. } => "global_avg_pool".into(),
            Node::Flatten { .. } => "flatten".into(),
            Node::Dropout { .. } => "dropout".into(),
        }
    }

    fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        match self {
            Node::Conv(c) => c.forward(x, ctx),
            Node::BatchNorm(b) => b.forward(x, ctx.mode),
            Node::Relu { input } => {
                let y = layers::relu(x);
                *input = Some(x.clone());
                Ok(y)
            }
            Node::Pool { kind, cache } => {
                let (y, c) = layers::pool2x2(x, *kind)?;
                *cache = Some(c);
                Ok(y)
            }
            Node::GlobalAvgPool { in_shape } => {
                *in_shape = Some(x.shape().to_vec());
                layers::global_avg_pool(x)
            }
            Node::Flatten { in_shape } => {
                *in_shape = Some(x.shape().to_vec());
                let n = x.batch();
                x.clone().reshape(&[n, x.item_len()])
            }
            Node::Dense(d) => {
                let y = d.dense.forward(x)?;
                d.input = Some(x.clone());
                Ok(y)
            }
            Node::Dropout { keep_prob, slot, gate } => {
                if ctx.mode == Mode::Train && *keep_prob < 1.0 {
                    let seed = rng::derive_seed(ctx.step_seed, &[tag::DROPOUT, *slot]);
                    let (y, g) = layers::dropout(x, *keep_prob, seed)?;
                    *gate = Some(g);
                    Ok(y)
                } else {
                    *gate = None;
                    Ok(x.clone())
                }
            }
            Node::Residual(r) => r.forward(x, ctx),
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let label = self.label();
        match self {
            Node::Conv(c) => c.backward(dy),
            Node::BatchNorm(b) => b.backward(dy),
            Node::Relu { input } => layers::relu_backward(input.as_ref().ok_or_else(|| missing_cache(&label))?, dy),
            Node::Pool { cache, .. } => {
                layers::pool2x2_backward(cache.as_ref().ok_or_else(|| missing_cache(&label))?, dy)
            }
            Node::GlobalAvgPool { in_shape } => {
                layers::global_avg_pool_backward(in_shape.as_ref().ok_or_else(|| missing_cache(&label))?, dy)
            }
            Node::Flatten { in_shape } => {
                let s = in_shape.as_ref().ok_or_else(|| missing_cache(&label))?;
                dy.clone().reshape(s)
            }
            Node::Dense(d) => {
                let x = d.input.as_ref().ok_or_else(|| missing_cache(&label))?;
                let g = d.dense.backward(x, dy)?;
                d.grads = Some((g.dweights, g.dbias));
                Ok(g.dx)
            }
            Node::Dropout { gate, .. } => match gate {
                Some(g) => layers::dropout_backward(g, dy),
                None => Ok(dy.clone()),
            },
            Node::Residual(r) => r.backward(dy),
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        match self {
            Node::Conv(c) => c.visit_params(f),
            Node::BatchNorm(b) => b.visit_params(f),
            Node::Dense(d) => {
                let grads = d.grads.as_ref();
                f(ParamSlot {
                    name: format!("{}.weight", d.name),
                    kind: ParamKind::Weight,
                    value: ParamValue::Plain(&mut d.dense.weights),
                    grad: grads.map(|g| g.0.as_slice()),
                });
                f(ParamSlot {
                    name: format!("{}.bias", d.name),
                    kind: ParamKind::Bias,
                    value: ParamValue::Plain(&mut d.dense.bias),
                    grad: grads.map(|g| g.1.as_slice()),
                });
            }
            Node::Residual(r) => {
                r.conv1.visit_params(f);
                r.bn1.visit_params(f);
                r.conv2.visit_params(f);
                r.bn2.visit_params(f);
            }
            _ => {}
        }
    }

    fn visit_tensors(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [Real])) {
        match self {
            Node::Conv(c) => c.visit_tensors(f),
            Node::BatchNorm(b) => b.visit_tensors(f),
            Node::Dense(d) => {
                let (i, o) = (d.dense.inputs, d.dense.outputs);
                f(&format!("{}.weight", d.name), &[o, i], &mut d.dense.weights);
                f(&format!("{}.bias", d.name), &[o], &mut d.dense.bias);
            }
            Node::Residual(r) => {
                r.conv1.visit_tensors(f);
                r.bn1.visit_tensors(f);
                r.conv2.visit_tensors(f);
                r.bn2.visit_tensors(f);
            }
            _ => {}
        }
    }

    fn convs<'a>(&'a self, out: &mut Vec<&'a ConvNode>) {
        match self {
            Node::Conv(c) => out.push(c),
            Node::Residual(r) => {
                out.push(&r.conv1);
                out.push(&r.conv2);
            }
            _ => {}
        }
    }

    fn convs_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvNode>) {
        match self {
            Node::Conv(c) => out.push(c),
            Node::Residual(r) => {
                out.push(&mut r.conv1);
                out.push(&mut r.conv2);
            }
            _ => {}
        }
    }
}

fn missing_cache(layer: &str) -> Error {
    Error::InvalidArgument(format!("backward through `{layer}` without a forward pass"))
}

/// An ordered sequence of nodes ending in class logits.
#[derive(Debug, Clone)]
pub struct Network {
    spec: Option<ModelSpec>,
    input: [usize; 3],
    nodes: Vec<Node>,
    last_nonfinite: Option<String>,
}

impl Network {
    /// Network from hand-assembled nodes (tests, toy models).
    pub fn from_nodes(input: [usize; 3], nodes: Vec<Node>) -> Self {
        Network {
            spec: None,
            input,
            nodes,
            last_nonfinite: None,
        }
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec.as_ref()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Number of layers with parameters (convs, batch norms, dense), the `L` of a training step.
    pub fn depth(&self) -> usize {
        let mut n = 0;
        for node in &self.nodes {
            n += match node {
                Node::Conv(_) | Node::BatchNorm(_) | Node::Dense(_) => 1,
                Node::Residual(_) => 4,
                _ => 0,
            };
        }
        n
    }

    pub fn convs(&self) -> Vec<&ConvNode> {
        let mut out = Vec::new();
        for n in &self.nodes {
            n.convs(&mut out);
        }
        out
    }

    pub fn convs_mut(&mut self) -> Vec<&mut ConvNode> {
        let mut out = Vec::new();
        for n in &mut self.nodes {
            n.convs_mut(&mut out);
        }
        out
    }

    pub fn dense_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Dense(_))).count()
    }

    pub fn set_mask_hooks(&mut self, hooks: MaskHooks) {
        for c in self.convs_mut() {
            c.layer.hooks = hooks;
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let [c, h, w] = self.input;
        if x.shape().len() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "network expects [N, {c}, {h}, {w}] input, got {:?}",
                x.shape()
            )));
        }
        self.last_nonfinite = None;
        let mut cur = x.clone();
        for node in &mut self.nodes {
            cur = node.forward(&cur, ctx)?;
            if self.last_nonfinite.is_none() && !cur.all_finite() {
                self.last_nonfinite = Some(node.label());
            }
        }
        Ok(cur)
    }

    /// Name of the first layer whose output had non-finite values in the
    /// latest forward call.
    pub fn first_nonfinite_layer(&self) -> Option<&str> {
        self.last_nonfinite.as_deref()
    }

    /// Backpropagate the logits gradient, storing parameter gradients.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let mut cur = dlogits.clone();
        for node in self.nodes.iter_mut().rev() {
            cur = node.backward(&cur)?;
        }
        Ok(cur)
    }

    /// Forward, mean cross-entropy and backward in one call. Returns the loss
    /// and the logits. A non-finite loss is returned as is; gradients are
    /// only computed for finite losses.
    pub fn loss_and_backward(&mut self, x: &Tensor, labels: &[usize], ctx: &ForwardCtx) -> Result<(f64, Tensor)> {
        let logits = self.forward(x, ctx)?;
        let (loss, dlogits) = layers::softmax_cross_entropy(&logits, labels)?;
        if loss.is_finite() {
            self.backward(&dlogits)?;
        }
        Ok((loss, logits))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        for n in &mut self.nodes {
            n.visit_params(f);
        }
    }

    /// Every persistent tensor (parameters, mask momentum, batch-norm
    /// running statistics) in network order.
    pub fn visit_tensors(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [Real])) {
        for n in &mut self.nodes {
            n.visit_tensors(f);
        }
    }

    /// Trainable parameter count, masks excluded.
    pub fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |slot| {
            if let ParamValue::Plain(v) = slot.value {
                total += v.len();
            }
        });
        total
    }

    /// Drop forward caches (e.g. after evaluation) to release memory.
    pub fn clear_caches(&mut self) {
        fn clear(node: &mut Node) {
            match node {
                Node::Conv(c) => c.cache = None,
                Node::BatchNorm(b) => b.cache = None,
                Node::Relu { input } => *input = None,
                Node::Pool { cache, .. } => *cache = None,
                Node::Dense(d) => d.input = None,
                Node::Dropout { gate, .. } => *gate = None,
                Node::Residual(r) => {
                    r.conv1.cache = None;
                    r.conv2.cache = None;
                    r.bn1.cache = None;
                    r.bn2.cache = None;
                    r.mid = None;
                    r.pre_out = None;
                }
                _ => {}
            }
        }
        self.nodes.iter_mut().for_each(clear);
    }

    /// Eval-mode class predictions.
    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x, &ForwardCtx::eval())?;
        self.clear_caches();
        Ok(layers::argmax_rows(&logits))
    }
}

struct Builder {
    seed: u64,
    mask: MaskSettings,
    mask_enabled: bool,
    weights_rng: rng::Rng,
    slot: u64,
}

impl Builder {
    fn conv(&mut self, name: String, shape: ConvShape) -> Result<ConvNode> {
        let slot = self.slot;
        self.slot += 1;
        let init = if self.mask_enabled {
            MaskInit {
                enabled: true,
                mean: self.mask.mean,
                variance: self.mask.variance,
                seed: rng::derive_seed(self.seed, &[tag::MASK_INIT, slot]),
            }
        } else {
            MaskInit::disabled()
        };
        let layer = SpectralConvLayer::new(name, shape, init, &mut self.weights_rng)?;
        Ok(ConvNode::new(layer, slot))
    }

    fn dense(&mut self, nodes: &mut Vec<Node>, name: &str, inputs: usize, outputs: usize, keep: Option<f64>) {
        if let Some(k) = keep {
            nodes.push(Node::dropout(k, self.slot));
            self.slot += 1;
        }
        let d = Dense::new(inputs, outputs, &mut self.weights_rng);
        nodes.push(Node::Dense(DenseNode::new(name, d)));
    }
}

/// Build a LeNet or residual network. Every conv is a spectral layer; with
/// masks disabled it carries a frozen all-ones mask.
pub fn build_network(spec: &ModelSpec, mask: MaskSettings, seed: u64) -> Result<Network> {
    let [c, h, w] = spec.input;
    if c == 0 || h == 0 || w == 0 || spec.classes == 0 {
        return Err(Error::InvalidArgument(format!("invalid model spec {spec}")));
    }
    if let Some(k) = spec.dropout_keep {
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::InvalidArgument(format!("dropout keep probability {k}")));
        }
    }
    let mut b = Builder {
        seed,
        mask,
        mask_enabled: spec.mask_enabled,
        weights_rng: rng::rng_for(seed, &[tag::WEIGHT_INIT]),
        slot: 0,
    };
    let mut nodes = Vec::new();
    match &spec.arch {
        Arch::LeNet => {
            let valid = |cin, cout, hh, ww| ConvShape {
                in_channels: cin,
                out_channels: cout,
                kernel: 5,
                height: hh,
                width: ww,
                stride: 1,
                pad: 0,
            };
            if h < 5 || w < 5 {
                return Err(Error::InvalidArgument("LeNet needs inputs of at least 5x5".into()));
            }
            let s1 = valid(c, 6, h, w);
            let (h1, w1) = s1.output();
            if h1 % 2 != 0 || w1 % 2 != 0 || h1 / 2 < 5 || w1 / 2 < 5 {
                return Err(Error::InvalidArgument(format!("LeNet cannot handle {h}x{w} inputs")));
            }
            nodes.push(Node::Conv(b.conv("conv1".into(), s1)?));
            nodes.push(Node::relu());
            nodes.push(Node::pool(PoolKind::Max));
            let s2 = valid(6, 16, h1 / 2, w1 / 2);
            let (h2, w2) = s2.output();
            if h2 % 2 != 0 || w2 % 2 != 0 {
                return Err(Error::InvalidArgument(format!("LeNet cannot handle {h}x{w} inputs")));
            }
            nodes.push(Node::Conv(b.conv("conv2".into(), s2)?));
            nodes.push(Node::relu());
            nodes.push(Node::pool(PoolKind::Max));
            nodes.push(Node::flatten());
            let flat = 16 * (h2 / 2) * (w2 / 2);
            b.dense(&mut nodes, "fc1", flat, 120, spec.dropout_keep);
            nodes.push(Node::relu());
            b.dense(&mut nodes, "fc2", 120, 84, spec.dropout_keep);
            nodes.push(Node::relu());
            b.dense(&mut nodes, "fc3", 84, spec.classes, spec.dropout_keep);
        }
        Arch::ResNet { stages, blocks, widths } => {
            if *stages == 0 || *blocks == 0 || widths.len() != *stages {
                return Err(Error::InvalidArgument(format!(
                    "resnet needs stages >= 1, blocks >= 1 and one width per stage (got {stages} stages, {blocks} blocks, widths {widths:?})"
                )));
            }
            if widths.iter().any(|&w| w == 0) || widths.windows(2).any(|p| p[1] < p[0]) {
                return Err(Error::InvalidArgument(format!(
                    "resnet widths must be positive and non-decreasing, got {widths:?}"
                )));
            }
            let mut ch = widths[0];
            let (mut hh, mut ww) = (h, w);
            nodes.push(Node::Conv(b.conv("stem".into(), ConvShape::same(c, ch, 3, hh, ww))?));
            nodes.push(Node::BatchNorm(BnNode::new("stem_bn", ch)));
            nodes.push(Node::relu());
            for (s, &width) in widths.iter().enumerate() {
                for blk in 0..*blocks {
                    let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                    let tag = |kind: &str, i: usize| format!("layer{}{kind}{}.{i}", s + 1, blk + 1);
                    let s1 = ConvShape {
                        stride,
                        ..ConvShape::same(ch, width, 3, hh, ww)
                    };
                    let (ho, wo) = s1.output();
                    let conv1 = b.conv(tag("conv", 1), s1)?;
                    let conv2 = b.conv(tag("conv", 2), ConvShape::same(width, width, 3, ho, wo))?;
                    nodes.push(Node::Residual(Box::new(ResidualBlock {
                        conv1,
                        bn1: BnNode::new(tag("bn", 1), width),
                        conv2,
                        bn2: BnNode::new(tag("bn", 2), width),
                        shortcut: Shortcut {
                            stride,
                            in_channels: ch,
                            out_channels: width,
                        },
                        in_shape: None,
                        mid: None,
                        pre_out: None,
                    })));
                    ch = width;
                    hh = ho;
                    ww = wo;
                }
            }
            nodes.push(Node::global_avg_pool());
            b.dense(&mut nodes, "fc", ch, spec.classes, spec.dropout_keep);
        }
    }
    Ok(Network {
        spec: Some(spec.clone()),
        input: spec.input,
        nodes,
        last_nonfinite: None,
    })
}
