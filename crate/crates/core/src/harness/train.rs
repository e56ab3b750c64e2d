use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{augment_batch, normalize, normalize_in_place, ChannelStats, Dataset};
use crate::network::layers::argmax_rows;
use crate::network::model::{build_network, ForwardCtx, Network};
use crate::network::optim::{OptimizerState, SgdConfig};
use crate::rng::{self, tag};
use crate::spectral_conv::mask_percentage;
use crate::{Error, Real, Result, Tensor};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::metrics::{EpochMetrics, MetricsLog};

/// Passed to the step observer after every optimizer update.
pub struct StepEvent<'a> {
    /// 0-based.
    pub epoch: usize,
    /// Global step count, 1-based.
    pub step: usize,
    pub loss: f64,
    pub net: &'a Network,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub net: Network,
    pub optimizer: OptimizerState,
    pub metrics: MetricsLog,
    pub stats: Option<ChannelStats>,
    pub steps: usize,
}

/// Build the network for `cfg`. With `init`, every tensor except the masks
/// is copied from the checkpoint; masks start from the configured
/// initialization.
pub fn prepare_network(cfg: &TrainConfig, input: [usize; 3], init: Option<&Checkpoint>) -> Result<Network> {
    cfg.validate()?;
    let spec = cfg.model_spec(input);
    let mut net = build_network(&spec, cfg.mask_settings(), cfg.seed)?;
    if let Some(ck) = init {
        let src = ck.spec();
        if src.arch != spec.arch || src.input != spec.input || src.classes != spec.classes {
            return Err(Error::Config(format!(
                "--init-from checkpoint is `{src}`, configuration builds `{spec}`"
            )));
        }
        let mut saved = std::collections::HashMap::new();
        let mut source = ck.net.clone();
        source.visit_tensors(&mut |name, _, data| {
            saved.insert(name.to_string(), data.to_vec());
        });
        net.visit_tensors(&mut |name, _, data| {
            if name.ends_with(".mask") || name.ends_with(".mask_momentum") {
                return;
            }
            if let Some(v) = saved.get(name) {
                data.copy_from_slice(v);
            }
        });
    }
    Ok(net)
}

/// Eval-mode accuracy over an already normalized dataset.
pub fn accuracy(net: &mut Network, ds: &Dataset, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    let batch = batch.max(1);
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch).min(ds.len());
        let idx: Vec<usize> = (start..end).collect();
        let part = ds.select(&idx);
        let pred = net.predict(part.images())?;
        correct += pred.iter().zip(part.labels()).filter(|(p, l)| p == l).count();
        start = end;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mask percentage of every masked conv, in network order.
pub fn mask_percentages(net: &Network) -> Vec<f64> {
    net.convs()
        .iter()
        .filter(|c| c.layer.mask_trainable())
        .map(|c| mask_percentage(c.layer.mask()))
        .collect()
}

fn masked_layer_names(net: &Network) -> Vec<String> {
    net.convs()
        .iter()
        .filter(|c| c.layer.mask_trainable())
        .map(|c| c.layer.name().to_string())
        .collect()
}

/// Full run: subset selection, optional normalization, then
/// [`train_network`] from a freshly prepared network.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    init: Option<&Checkpoint>,
    on_step: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<TrainRun> {
    let train_set = cfg
        .train_subset
        .map_or_else(|| train_set.clone(), |n| train_set.take(n));
    let test_set = cfg.test_subset.map_or_else(|| test_set.clone(), |n| test_set.take(n));
    let net = prepare_network(cfg, train_set.image_shape(), init)?;
    train_network(net, cfg, &train_set, &test_set, on_step)
}

/// Minibatch SGD on `net`: per step a training-mode forward with binarized
/// masks, backward, then the momentum update for weights and the
/// update/clip/symmetrize step for masks.
pub fn train_network(
    mut net: Network,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    on_step: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<TrainRun> {
    cfg.validate()?;
    if train_set.image_shape() != net.input_shape() || test_set.image_shape() != net.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "network expects {:?} images, data has {:?} / {:?}",
            net.input_shape(),
            train_set.image_shape(),
            test_set.image_shape()
        )));
    }
    let stats = if cfg.normalize {
        let s = train_set.channel_stats();
        s.validate()?;
        Some(s)
    } else {
        None
    };
    let test_norm = match stats {
        Some(s) => normalize(test_set, s)?,
        None => test_set.clone(),
    };
    let mut optimizer = OptimizerState::new();
    let mut metrics = MetricsLog::new(masked_layer_names(&net));
    let mut step = 0usize;
    let n = train_set.len();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::rng_for(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let sgd = SgdConfig {
            lr: cfg.lr_at(epoch) as Real,
            momentum: cfg.momentum as Real,
            weight_decay: cfg.weight_decay as Real,
            mask_lr: cfg.mask_lr as Real,
        };
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for ids in order.chunks(cfg.batch_size) {
            // batch statistics need at least two samples
            if ids.len() < 2 {
                continue;
            }
            let batch = train_set.select(ids);
            let mut x: Tensor = augment_batch(batch.images(), ids, cfg.augment, cfg.seed, epoch);
            if let Some(s) = &stats {
                normalize_in_place(&mut x, s);
            }
            step += 1;
            let ctx = ForwardCtx {
                random_drop: cfg.random_drop,
                ..ForwardCtx::train(rng::derive_seed(cfg.seed, &[tag::STEP, step as u64]))
            };
            let (loss, logits) = net.loss_and_backward(&x, batch.labels(), &ctx)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    step,
                    layer: net.first_nonfinite_layer().unwrap_or("loss").to_string(),
                });
            }
            optimizer.step(&mut net, &sgd)?;
            loss_sum += loss * ids.len() as f64;
            seen += ids.len();
            correct += argmax_rows(&logits)
                .iter()
                .zip(batch.labels())
                .filter(|(p, l)| p == l)
                .count();
            on_step(&StepEvent {
                epoch,
                step,
                loss,
                net: &net,
            });
        }
        net.clear_caches();
        let test_acc = accuracy(&mut net, &test_norm, 256)?;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
            mask_pct: mask_percentages(&net),
            seconds: started.elapsed().as_secs_f64(),
        })?;
    }
    Ok(TrainRun {
        net,
        optimizer,
        metrics,
        stats,
        steps: step,
    })
}
