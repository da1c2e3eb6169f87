//! Stochastic gradient descent with momentum, weight decay, and a
//! step-decay learning-rate schedule.

use crate::error::{Error, Result};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// (epoch, divisor) milestones; each divisor applies from its epoch on.
    pub schedule: Vec<(usize, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            schedule: vec![(100, 10.0), (150, 10.0), (200, 10.0)],
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Effective learning rate at `epoch` under the step schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &(milestone, divisor) in &self.schedule {
            if epoch >= milestone {
                lr /= divisor;
            }
        }
        lr
    }
}

/// Per-parameter-group velocity buffers.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocities: Vec<Vec<f64>>,
}

impl SgdState {
    /// Zero-initialized state matching the given parameter group sizes.
    pub fn new(group_sizes: &[usize]) -> SgdState {
        SgdState { velocities: group_sizes.iter().map(|&n| vec![0.0; n]).collect() }
    }
}

/// One optimizer step over all parameter groups:
/// `v <- momentum v + (g + weight_decay w); w <- w - lr(epoch) v`.
///
/// A group with an empty gradient slice is frozen: its parameters and
/// velocity are left untouched.
pub fn sgd_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut SgdState,
    cfg: &SgdConfig,
    epoch: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step group counts disagree: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    let lr = cfg.lr_at(epoch);
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocities) {
        if g.is_empty() && !w.is_empty() {
            continue;
        }
        if w.len() != g.len() || w.len() != v.len() {
            return Err(Error::InvalidArgument(format!(
                "sgd_step group sizes disagree: {} params, {} grads, {} velocities",
                w.len(),
                g.len(),
                v.len()
            )));
        }
        for ((wi, gi), vi) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *wi);
            *wi -= lr * *vi;
        }
    }
    Ok(())
}
