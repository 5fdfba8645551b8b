//! Momentum SGD with L2 weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::layers::Param;
use crate::tensor::Real;
use crate::{NnetError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// The rate is multiplied by `lr_gamma` every `lr_step_epochs` epochs.
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Drop probability of the dropout layer after fc5.
    pub dropout: f64,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            lr_step_epochs: 10,
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 512,
            dropout: 0.9,
            max_epochs: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NnetError::InvalidConfig(msg.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.lr_step_epochs == 0 || !(self.lr_gamma > 0.0) {
            return bad("learning-rate schedule must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch count must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch: `lr0 * gamma^(epoch / step)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SgdState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn for_params(params: &[&mut Param<T>]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn flatten_f32(&self) -> Vec<f32> {
        self.velocity
            .iter()
            .flat_map(|v| v.iter().map(|x| x.to_f64_lossy() as f32))
            .collect()
    }

    pub fn from_flat_f32(lens: &[usize], flat: &[f32]) -> Result<Self> {
        if lens.iter().sum::<usize>() != flat.len() {
            return Err(NnetError::ShapeMismatch("optimizer state size mismatch".into()));
        }
        let mut off = 0;
        let velocity = lens
            .iter()
            .map(|&n| {
                let v = flat[off..off + n]
                    .iter()
                    .map(|&x| T::from_f64_lossy(f64::from(x)))
                    .collect();
                off += n;
                v
            })
            .collect();
        Ok(Self { velocity })
    }
}

/// One update: `v <- mu*v - lr*(g + lambda*w)`, `w <- w + v`.
pub fn sgd_step<T: Real>(params: &mut [&mut Param<T>], state: &mut SgdState<T>, cfg: &TrainConfig, epoch: usize) {
    if state.velocity.len() != params.len() {
        *state = SgdState::for_params(params);
    }
    let lr = T::from_f64_lossy(cfg.learning_rate(epoch));
    let mu = T::from_f64_lossy(cfg.momentum);
    let decay = T::from_f64_lossy(cfg.weight_decay);
    for (p, vel) in params.iter_mut().zip(state.velocity.iter_mut()) {
        for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(vel.iter_mut()) {
            *v = mu * *v - lr * (g + decay * *w);
            *w = *w + *v;
        }
    }
}
