#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specmask::network::layers::{softmax_cross_entropy, Dense, PoolKind};
use specmask::network::model::{BnNode, ConvNode, DenseNode, ForwardCtx, Network, Node, ParamValue};
use specmask::spectral_conv::{ConvShape, MaskInit, SpectralConvLayer};
use specmask::{Real, Tensor};

pub fn toy_network(seed: u64, mask: bool) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = |s: u64| MaskInit {
        enabled: mask,
        mean: 0.8,
        variance: 0.05,
        seed: s,
    };
    let c1 = SpectralConvLayer::new("conv1", ConvShape::same(1, 2, 3, 4, 4), init(seed + 1), &mut rng).unwrap();
    let c2 = SpectralConvLayer::new("conv2", ConvShape::same(2, 2, 3, 4, 4), init(seed + 2), &mut rng).unwrap();
    let fc = Dense::new(8, 2, &mut rng);
    Network::from_nodes(
        [1, 4, 4],
        vec![
            // no bias feeds batch norm directly, where its gradient would be exactly zero
            Node::Conv(ConvNode::new(c1, 0)),
            Node::relu(),
            Node::BatchNorm(BnNode::new("bn1", 2)),
            Node::Conv(ConvNode::new(c2, 1)),
            Node::relu(),
            Node::pool(PoolKind::Avg),
            Node::flatten(),
            Node::Dense(DenseNode::new("fc", fc)),
        ],
    )
}

pub fn random_batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Real> = (0..n * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..2)).collect();
    (Tensor::from_vec(&[n, 1, 4, 4], x).unwrap(), labels)
}

/// Loss and the ReLU activation pattern of the forward pass.
pub fn loss_only(net: &mut Network, x: &Tensor, labels: &[usize]) -> (f64, Vec<bool>) {
    let logits = net.forward(x, &ForwardCtx::train(0)).unwrap();
    let mut pattern = Vec::new();
    for node in net.nodes() {
        if let Node::Relu { input: Some(t) } = node {
            pattern.extend(t.data().iter().map(|&v| v > 0.0));
        }
    }
    (softmax_cross_entropy(&logits, labels).unwrap().0, pattern)
}

pub struct GradCheck {
    pub name: String,
    pub error: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn perturb(net: &mut Network, name: &str, i: usize, value: Real) {
    net.visit_params(&mut |slot| {
        if slot.name == name {
            match slot.value {
                ParamValue::Plain(v) => v[i] = value,
                ParamValue::Mask(m) => m.values_mut()[i] = value,
            }
        }
    });
}

/// max |analytic - numeric| / max(|analytic|, |numeric|) per parameter
/// tensor. Entries whose perturbation flips a ReLU are not differentiable
/// at the sampled scale and are left out.
pub fn gradient_errors(net: &mut Network, x: &Tensor, labels: &[usize], h: Real) -> Vec<GradCheck> {
    net.loss_and_backward(x, labels, &ForwardCtx::train(0)).unwrap();
    let (_, base_pattern) = loss_only(net, x, labels);
    let mut params: Vec<(String, Vec<Real>, Vec<f64>)> = Vec::new();
    net.visit_params(&mut |slot| {
        let values = match slot.value {
            ParamValue::Plain(v) => v.to_vec(),
            ParamValue::Mask(m) => m.values().to_vec(),
        };
        let grad = slot
            .grad
            .expect("gradient after backward")
            .iter()
            .map(|&g| g as f64)
            .collect();
        params.push((slot.name, values, grad));
    });
    let mut out = Vec::new();
    for (name, values, grad) in params {
        let (mut diff, mut scale, mut skipped) = (0.0f64, 0.0f64, 0);
        for (i, &v) in values.iter().enumerate() {
            perturb(net, &name, i, v + h);
            let (plus, p_plus) = loss_only(net, x, labels);
            perturb(net, &name, i, v - h);
            let (minus, p_minus) = loss_only(net, x, labels);
            perturb(net, &name, i, v);
            if p_plus != base_pattern || p_minus != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h as f64);
            diff = diff.max((grad[i] - numeric).abs());
            scale = scale.max(grad[i].abs()).max(numeric.abs());
        }
        out.push(GradCheck {
            error: if scale == 0.0 { diff } else { diff / scale },
            checked: values.len() - skipped,
            skipped,
            name,
        });
    }
    out
}

#[cfg(not(feature = "f64"))]
pub const GRAD_TOL: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const GRAD_TOL: f64 = 1e-6;
#[cfg(not(feature = "f64"))]
pub const FD_STEP: Real = 1e-3;
#[cfg(feature = "f64")]
pub const FD_STEP: Real = 1e-5;
