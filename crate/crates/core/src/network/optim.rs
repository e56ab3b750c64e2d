use std::collections::BTreeMap;

use crate::spectral_conv::update_mask;
use crate::{Error, Real, Result};

use super::model::{Network, ParamKind, ParamValue};

/// `v <- momentum * v + grad + decay * param; param <- param - lr * v`.
/// Weight decay is forced to zero for mask parameters.
pub fn sgd_momentum_step(
    param: &mut [Real],
    grad: &[Real],
    velocity: &mut [Real],
    lr: Real,
    momentum: Real,
    weight_decay: Real,
    is_mask: bool,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd step: param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let decay = if is_mask { 0.0 } else { weight_decay };
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Hyper-parameters of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    /// Learning rate for spectral masks.
    pub mask_lr: Real,
}

/// Momentum buffers for every non-mask parameter, keyed by parameter name.
/// Mask momentum lives in the mask itself.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    buffers: BTreeMap<String, Vec<Real>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<Real>> {
        &self.buffers
    }

    pub fn insert(&mut self, name: String, buffer: Vec<Real>) {
        self.buffers.insert(name, buffer);
    }

    /// Apply one step to every trainable parameter that has a gradient.
    pub fn step(&mut self, net: &mut Network, cfg: &SgdConfig) -> Result<()> {
        let mut result = Ok(());
        net.visit_params(&mut |slot| {
            if result.is_err() {
                return;
            }
            let Some(grad) = slot.grad else { return };
            result = match slot.value {
                ParamValue::Mask(mask) => update_mask(mask, grad, cfg.mask_lr, cfg.momentum),
                ParamValue::Plain(values) => {
                    let buf = self
                        .buffers
                        .entry(slot.name.clone())
                        .or_insert_with(|| vec![0.0; values.len()]);
                    debug_assert!(slot.kind != ParamKind::Mask);
                    sgd_momentum_step(values, grad, buf, cfg.lr, cfg.momentum, cfg.weight_decay, false)
                }
            };
        });
        result
    }
}
