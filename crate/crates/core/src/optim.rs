//! Optimizers and learning-rate schedules.
//!
//! AdamW (decoupled weight decay) drives pretraining under a one-cycle
//! schedule; RAdam with per-epoch exponential decay drives finetuning.
//! Every parameter carries its own learning-rate multiplier, weight decay
//! and optional row mask (rows outside the mask never change).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::{GradBuffer, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    RAdam,
    /// Plain gradient descent; weight decay then acts as a ridge penalty.
    Sgd,
}

#[derive(Clone, Debug)]
pub struct ParamSettings {
    pub lr_scale: f64,
    pub weight_decay: f64,
    /// Rows allowed to change; `None` means all rows.
    pub trainable_rows: Option<Vec<bool>>,
}

impl Default for ParamSettings {
    fn default() -> Self {
        Self { lr_scale: 1.0, weight_decay: 0.0, trainable_rows: None }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    max_grad_norm: Option<f64>,
    settings: Vec<ParamSettings>,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    steps: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.ids().map(|id| Array2::zeros(s.get(id).dim())).collect::<Vec<_>>();
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
            settings: vec![ParamSettings::default(); store.len()],
            m: zeros(store),
            v: zeros(store),
            steps: 0,
        }
    }

    pub fn with_max_grad_norm(mut self, norm: Option<f64>) -> Self {
        self.max_grad_norm = norm;
        self
    }

    pub fn settings_mut(&mut self, id: ParamId) -> &mut ParamSettings {
        &mut self.settings[id.0]
    }

    pub fn settings(&self, id: ParamId) -> &ParamSettings {
        &self.settings[id.0]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Learning rate actually applied to `id` for a base rate `lr`.
    pub fn applied_lr(&self, id: ParamId, lr: f64) -> f64 {
        lr * self.settings[id.0].lr_scale
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.steps += 1;
        let t = self.steps as f64;
        let clip = match self.max_grad_norm {
            Some(max) => {
                let n = grads.global_norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);

        // RAdam variance rectification term, shared by all parameters.
        let rect = match self.kind {
            OptimizerKind::AdamW | OptimizerKind::Sgd => Some(1.0),
            OptimizerKind::RAdam => {
                let rho_inf = 2.0 / (1.0 - b2) - 1.0;
                let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
                if rho_t > 5.0 {
                    Some(
                        ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                            .sqrt(),
                    )
                } else {
                    None
                }
            }
        };

        for id in store.ids().collect::<Vec<_>>() {
            let s = &self.settings[id.0];
            if s.lr_scale == 0.0 {
                continue;
            }
            let step_lr = lr * s.lr_scale;
            let wd = s.weight_decay;
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let w = store.get_mut(id);
            let cols = w.ncols();
            for (idx, ((wi, mi), vi)) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).enumerate() {
                if let Some(rows) = &s.trainable_rows {
                    if !rows[idx / cols] {
                        continue;
                    }
                }
                let gi = g.as_slice().map(|sl| sl[idx]).unwrap_or_else(|| g[[idx / cols, idx % cols]]) * clip;
                if self.kind == OptimizerKind::Sgd {
                    *wi -= step_lr * (wd * *wi + gi);
                    continue;
                }
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                *wi -= step_lr * wd * *wi;
                match rect {
                    Some(r) => {
                        let vhat = (*vi / bc2).sqrt();
                        *wi -= step_lr * r * mhat / (vhat + self.eps);
                    }
                    None => *wi -= step_lr * mhat,
                }
            }
        }
        store.round_to_storage();
    }
}

/// Linear warm-up followed by cosine annealing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self { max_lr, total_steps: total_steps.max(1), pct_start: 0.3, div_factor: 25.0, final_div_factor: 1e4 }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let initial = self.max_lr / self.div_factor;
        let min = initial / self.final_div_factor;
        let warm = ((self.total_steps as f64) * self.pct_start).max(1.0);
        let s = step as f64;
        let cos = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        if s < warm {
            cos(initial, self.max_lr, s / warm)
        } else {
            let rest = (self.total_steps as f64 - warm).max(1.0);
            cos(self.max_lr, min, ((s - warm) / rest).min(1.0))
        }
    }
}

/// `lr · γ^epoch`
pub fn exponential_lr(base: f64, gamma: f64, epoch: usize) -> f64 {
    base * gamma.powi(epoch as i32)
}
