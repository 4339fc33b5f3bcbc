use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::model::ModelParams;

/// Heavy-ball SGD state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: ModelParams,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("SGD momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight decay {weight_decay} must be non-negative")));
        }
        Ok(Self {
            velocity: params.zeros_like(),
            momentum,
            weight_decay,
        })
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }
}

/// `v ← μ·v + g + wd·p`, then `p ← p − lr·v`.
///
/// A non-finite gradient aborts before anything is modified.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let g = grads.tensors();
    if g.len() != state.velocity.tensors().len()
        || g.iter().zip(params.tensors()).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::shape("gradient tensors do not match parameters"));
    }
    for (t, tensor) in g.iter().enumerate() {
        if let Some(k) = tensor.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient tensor {t}, entry {k}")));
        }
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((p, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors_mut())
        .zip(g)
    {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Multiply by each milestone's factor once its epoch is reached.
    Step(Vec<Milestone>),
    /// Half-cosine from `base_lr` toward zero over the post-warmup epochs.
    Cosine,
}

/// Per-epoch learning rate: linear warmup, then step or cosine decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub kind: ScheduleKind,
    pub total_epochs: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, kind: ScheduleKind, total_epochs: usize) -> Result<Self> {
        if !(base_lr >= 0.0) {
            return Err(Error::invalid(format!("base lr {base_lr} must be non-negative")));
        }
        if total_epochs == 0 {
            return Err(Error::invalid("schedule needs at least one epoch"));
        }
        if let ScheduleKind::Step(ms) = &kind {
            if ms.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
                return Err(Error::invalid("milestones must be strictly increasing"));
            }
            if let Some(m) = ms.iter().find(|m| m.epoch >= total_epochs) {
                return Err(Error::invalid(format!(
                    "milestone {} is not before the final epoch {total_epochs}",
                    m.epoch
                )));
            }
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            kind,
            total_epochs,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        Ok(match &self.kind {
            ScheduleKind::Step(ms) => ms
                .iter()
                .filter(|m| m.epoch <= epoch)
                .fold(self.base_lr, |lr, m| lr * m.factor),
            ScheduleKind::Cosine => {
                let span = (self.total_epochs - self.warmup_epochs) as f64;
                let progress = (epoch - self.warmup_epochs) as f64 / span;
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        })
    }
}
