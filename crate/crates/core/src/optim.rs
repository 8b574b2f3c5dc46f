//! AdamW restricted to a trainable set, and the warm-up + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{GradSet, Selection, TrainSet, ViTParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments for exactly the trainable scalars, laid out in
/// trainable-set order (column entries row-major over the kept columns).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(set: &TrainSet, config: AdamWConfig) -> Self {
        let n = set.scalar_count();
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            config,
        }
    }

    pub fn bytes(&self) -> usize {
        (self.m.len() + self.v.len()) * std::mem::size_of::<f64>()
    }
}

/// One AdamW update on the entries of `set`; every other scalar is left
/// untouched.
pub fn adamw_step(
    params: &mut ViTParams,
    grads: &GradSet,
    set: &TrainSet,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    grads.check_aligned(set)?;
    if state.m.len() != set.scalar_count() || state.v.len() != state.m.len() {
        return Err(Error::Internal(format!(
            "optimizer state holds {} scalars, trainable set {}",
            state.m.len(),
            set.scalar_count()
        )));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let mut offset = 0;
    for ((name, g), entry) in grads.iter().zip(set.entries()) {
        let wd = if entry.decay { c.weight_decay } else { 0.0 };
        let theta = params
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("parameter {name} missing")))?;
        let g = g.data();
        let m = &mut state.m[offset..offset + g.len()];
        let v = &mut state.v[offset..offset + g.len()];
        let mut update = |p: &mut f64, k: usize| {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * *p);
        };
        match &entry.selection {
            Selection::Full => {
                for (k, p) in theta.data_mut().iter_mut().enumerate() {
                    update(p, k);
                }
            }
            Selection::Columns(cols) => {
                let width = entry.shape[1];
                let data = theta.data_mut();
                for i in 0..entry.shape[0] {
                    for (jj, &j) in cols.iter().enumerate() {
                        update(&mut data[i * width + j], i * cols.len() + jj);
                    }
                }
            }
        }
        offset += g.len();
    }
    Ok(())
}

/// Linear per-step warm-up followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn new(warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize) -> Result<Self> {
        if total_epochs > 0 && warmup_epochs >= total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({warmup_epochs}) must be below epochs ({total_epochs})"
            )));
        }
        if steps_per_epoch == 0 {
            return Err(Error::config("steps_per_epoch must be positive"));
        }
        Ok(Schedule {
            warmup_epochs,
            total_epochs,
            steps_per_epoch,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

pub fn lr_at(sched: &Schedule, base_lr: f64, step: usize) -> f64 {
    let warm = sched.warmup_steps();
    if step < warm {
        return base_lr * step as f64 / warm as f64;
    }
    let span = sched.total_steps().saturating_sub(warm).max(1);
    let t = ((step - warm) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
