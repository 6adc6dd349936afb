//! Optimizers and learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    SgdMomentum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
    WarmupCosine,
}

/// Learning rate at step `t` (1-based) of `total`. Cosine schedules decay
/// from `lr` to `lr * min_ratio` at `t = total`; warmup is linear from
/// `lr / warmup` at step 1 to `lr` at step `warmup`.
pub fn lr_at(
    schedule: LrSchedule,
    lr: f64,
    min_ratio: f64,
    warmup: u64,
    total: u64,
    t: u64,
) -> f64 {
    let floor = lr * min_ratio;
    let cosine = |progress: f64| floor + (lr - floor) * 0.5 * (1.0 + (PI * progress).cos());
    match schedule {
        LrSchedule::Constant => lr,
        LrSchedule::Cosine => cosine(t.min(total) as f64 / total.max(1) as f64),
        LrSchedule::WarmupCosine => {
            if t <= warmup {
                lr * t as f64 / warmup as f64
            } else {
                let span = total.saturating_sub(warmup).max(1);
                cosine((t - warmup).min(span) as f64 / span as f64)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update of a single tensor with decoupled weight decay and
/// bias correction. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    hp: &AdamHyper,
) {
    debug_assert!(step >= 1);
    let c1 = 1.0 - hp.beta1.powf(step as f64);
    let c2 = 1.0 - hp.beta2.powf(step as f64);
    let decay = 1.0 - lr * hp.weight_decay;
    for i in 0..w.len() {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        w[i] = w[i] * decay - lr * mhat / (vhat.sqrt() + hp.eps);
    }
}

/// Heavy-ball SGD with decoupled weight decay.
pub fn sgd_momentum_step(w: &mut [f64], g: &[f64], vel: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    let decay = 1.0 - lr * weight_decay;
    for i in 0..w.len() {
        vel[i] = momentum * vel[i] + g[i];
        w[i] = w[i] * decay - lr * vel[i];
    }
}

/// Optimizer moments, one buffer per parameter tensor. SGD keeps its
/// velocity in `m` and leaves `v` empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub hyper: AdamHyper,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    pub state: OptimState,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        hyper: AdamHyper,
        momentum: f64,
        grad_clip: Option<f64>,
        params: &[Tensor],
    ) -> Self {
        let zeros = || params.iter().map(|t| vec![0.0; t.numel()]).collect();
        let state = match kind {
            OptimizerKind::Adamw => OptimState {
                m: zeros(),
                v: zeros(),
            },
            OptimizerKind::SgdMomentum => OptimState {
                m: zeros(),
                v: Vec::new(),
            },
        };
        Self {
            kind,
            hyper,
            momentum,
            grad_clip,
            state,
        }
    }

    /// Applies one update. Gradients are checked for non-finite values
    /// before anything is modified. Weight decay applies to matrices only
    /// (rank >= 2), never to biases, gains or other vectors.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [Tensor],
        grads: &mut [Vec<f64>],
        step: u64,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in names.iter().zip(grads.iter()) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad {
                    param: name.clone(),
                    step,
                });
            }
        }
        if let Some(max_norm) = self.grad_clip {
            let norm = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
            }
        }
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let wd = if p.ndim() >= 2 {
                self.hyper.weight_decay
            } else {
                0.0
            };
            match self.kind {
                OptimizerKind::Adamw => {
                    let hp = AdamHyper {
                        weight_decay: wd,
                        ..self.hyper
                    };
                    adamw_step(
                        p.data_mut(),
                        g,
                        &mut self.state.m[i],
                        &mut self.state.v[i],
                        step,
                        lr,
                        &hp,
                    );
                }
                OptimizerKind::SgdMomentum => {
                    sgd_momentum_step(p.data_mut(), g, &mut self.state.m[i], lr, self.momentum, wd)
                }
            }
        }
        Ok(())
    }
}
