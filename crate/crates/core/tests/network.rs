use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{gradient_errors, random_batch, toy_network, FD_STEP, GRAD_TOL};
use specmask::network::layers::Mode;
use specmask::network::model::{build_network, Arch, ForwardCtx, MaskSettings, ModelSpec, Network};
use specmask::network::optim::{OptimizerState, SgdConfig};
use specmask::spectral_conv::{BackwardMask, ForwardMask, MaskHooks};
use specmask::{Real, Tensor};

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut net = toy_network(3, true);
    net.set_mask_hooks(MaskHooks {
        forward: ForwardMask::Identity,
        backward: BackwardMask::Forward,
    });
    let (x, labels) = random_batch(6, 11);
    let checks = gradient_errors(&mut net, &x, &labels, FD_STEP);
    let names: Vec<&str> = checks.iter().map(|c| c.name.as_str()).collect();
    for expected in [
        "conv1.weight",
        "conv1.bias",
        "conv1.mask",
        "bn1.gamma",
        "bn1.beta",
        "conv2.mask",
        "fc.weight",
        "fc.bias",
    ] {
        assert!(names.contains(&expected), "{expected} missing from {names:?}");
    }
    let total: usize = checks.iter().map(|c| c.checked + c.skipped).sum();
    let skipped: usize = checks.iter().map(|c| c.skipped).sum();
    assert!(skipped * 20 < total, "{skipped} of {total} entries crossed a ReLU kink");
    for c in &checks {
        assert!(c.checked > 0, "{}: every entry crossed a kink", c.name);
        assert!(c.error < GRAD_TOL, "{}: relative error {:.3e}", c.name, c.error);
    }
}

fn separable_set() -> (Tensor, Vec<usize>) {
    // class 0 is brighter on the left half, class 1 on the right half
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20;
    let mut x = Vec::with_capacity(n * 16);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        for _row in 0..4 {
            for col in 0..4 {
                let bright = (col < 2) == (label == 0);
                x.push(if bright { 1.0 } else { -1.0 } + rng.random_range(-0.2..0.2));
            }
        }
        labels.push(label);
    }
    (Tensor::from_vec(&[n, 1, 4, 4], x).unwrap(), labels)
}

fn sgd(lr: Real) -> SgdConfig {
    SgdConfig {
        lr,
        momentum: 0.9,
        weight_decay: 0.0,
        mask_lr: 0.01,
    }
}

fn fit(net: &mut Network, x: &Tensor, labels: &[usize], steps: usize, lr: Real) -> Vec<f64> {
    let mut opt = OptimizerState::new();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, _) = net
            .loss_and_backward(x, labels, &ForwardCtx::train(step as u64))
            .unwrap();
        opt.step(net, &sgd(lr)).unwrap();
        losses.push(loss);
    }
    losses
}

#[test]
fn loss_decreases_on_separable_data() {
    let mut net = toy_network(1, true);
    let (x, labels) = separable_set();
    let losses = fit(&mut net, &x, &labels, 50, 0.05);
    let last = *losses.last().unwrap();
    assert!(last < 0.1, "loss after 50 steps: {last} (first {})", losses[0]);
}

fn snapshot(net: &mut Network) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    net.visit_tensors(&mut |name, _, data| {
        out.push((name.to_string(), data.iter().map(|v| (*v as f32).to_bits()).collect()));
    });
    out
}

#[test]
fn fixed_seed_gives_bitwise_identical_trajectories() {
    let (x, labels) = random_batch(8, 2);
    let run = || {
        let mut net = toy_network(9, true);
        let mut trajectory = Vec::new();
        let mut opt = OptimizerState::new();
        for step in 0..10 {
            let ctx = ForwardCtx {
                random_drop: 0.2,
                ..ForwardCtx::train(step)
            };
            net.loss_and_backward(&x, &labels, &ctx).unwrap();
            opt.step(&mut net, &sgd(0.05)).unwrap();
            trajectory.push(snapshot(&mut net));
        }
        trajectory
    };
    assert_eq!(run(), run());
}

fn memorize(arch: Arch, max_steps: usize) -> (usize, f64) {
    let mut net = build_network(&ModelSpec::cifar(arch, true), MaskSettings::default(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 10;
    let x: Vec<Real> = (0..n * 3 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Tensor::from_vec(&[n, 3, 32, 32], x).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let mut opt = OptimizerState::new();
    let mut acc = 0.0;
    for step in 1..=max_steps {
        net.loss_and_backward(&x, &labels, &ForwardCtx::train(step as u64))
            .unwrap();
        opt.step(&mut net, &sgd(0.01)).unwrap();
        if step % 10 == 0 {
            let pred = net.predict(&x).unwrap();
            acc = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
            if acc == 1.0 {
                return (step, acc);
            }
        }
    }
    (max_steps, acc)
}

#[test]
fn lenet_memorizes_ten_random_samples() {
    let (steps, acc) = memorize(Arch::LeNet, 500);
    assert_eq!(acc, 1.0, "accuracy {acc} after {steps} steps");
}

#[test]
fn resnet_memorizes_ten_random_samples() {
    let (steps, acc) = memorize(Arch::resnet20(), 500);
    assert_eq!(acc, 1.0, "accuracy {acc} after {steps} steps");
}

#[test]
fn eval_mode_is_read_only() {
    let mut net = build_network(&ModelSpec::cifar(Arch::resnet20(), true), MaskSettings::default(), 1).unwrap();
    let before = snapshot(&mut net);
    let x = Tensor::from_vec(&[2, 3, 32, 32], vec![0.5; 2 * 3072]).unwrap();
    let a = net.forward(&x, &ForwardCtx::eval()).unwrap();
    let b = net
        .forward(
            &x,
            &ForwardCtx {
                mode: Mode::Eval,
                random_drop: 0.5,
                step_seed: 3,
            },
        )
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(snapshot(&mut net), before);
}
