//! SGD with classical (heavy-ball) momentum and the epoch-decay schedule.

use super::tensor::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One optimizer step: m <- momentum * m + g; p <- p - lr * m; grads cleared.
///
/// Every parameter must have had its gradient populated since the last step.
pub fn sgd_momentum_step<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut missing: Option<String> = None;
    params.for_each_param(&mut |name, p| {
        if missing.is_some() {
            return;
        }
        if !p.seen_grad {
            missing = Some(name.to_string());
            return;
        }
        let lr_t = T::from_f64c(lr);
        let mom_t = T::from_f64c(momentum);
        for i in 0..p.value.data.len() {
            let m = mom_t * p.momentum.data[i] + p.grad.data[i];
            p.momentum.data[i] = m;
            p.value.data[i] = p.value.data[i] - lr_t * m;
            p.grad.data[i] = T::zero();
        }
        p.seen_grad = false;
    });
    match missing {
        Some(name) => Err(Error::MissingGradient(name)),
        None => Ok(()),
    }
}

/// Learning rate at `epoch`: lr0 * 0.001^(epoch / max_epoch).
pub fn lr_at_epoch(lr0: f64, epoch: usize, max_epoch: usize) -> f64 {
    assert!(max_epoch >= 1 && epoch <= max_epoch);
    lr0 * 0.001f64.powf(epoch as f64 / max_epoch as f64)
}
