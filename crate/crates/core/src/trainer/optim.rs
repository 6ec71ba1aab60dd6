//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::encoder::{ModelGrad, TwoTowerModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate for the update that takes the step counter from `step`
    /// to `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m_w1: Array2<f64>,
    pub v_w1: Array2<f64>,
    pub m_w2: Array2<f64>,
    pub v_w2: Array2<f64>,
    pub m_tau: f64,
    pub v_tau: f64,
    /// Number of updates applied so far.
    pub t: u64,
}

/// How the temperature participates in an update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauUpdate {
    pub lr: f64,
    pub tau_min: f64,
}

impl AdamW {
    pub fn new(model: &TwoTowerModel, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m_w1: Array2::zeros(model.w1.raw_dim()),
            v_w1: Array2::zeros(model.w1.raw_dim()),
            m_w2: Array2::zeros(model.w2.raw_dim()),
            v_w2: Array2::zeros(model.w2.raw_dim()),
            m_tau: 0.0,
            v_tau: 0.0,
            t: 0,
        }
    }

    /// Apply one update. Weight decay applies to the tower weights only; the
    /// temperature moves only when `tau` is given and is clamped at `tau_min`.
    pub fn step(&mut self, model: &mut TwoTowerModel, grad: &ModelGrad, lr: f64, tau: Option<TauUpdate>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let update = |p: &mut Array2<f64>, g: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>| {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p *= 1.0 - lr * wd;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        };
        update(&mut model.w1, &grad.w1, &mut self.m_w1, &mut self.v_w1);
        update(&mut model.w2, &grad.w2, &mut self.m_w2, &mut self.v_w2);
        if let Some(TauUpdate { lr: tau_lr, tau_min }) = tau {
            self.m_tau = b1 * self.m_tau + (1.0 - b1) * grad.tau;
            self.v_tau = b2 * self.v_tau + (1.0 - b2) * grad.tau * grad.tau;
            let step = tau_lr * (self.m_tau / bc1) / ((self.v_tau / bc2).sqrt() + eps);
            model.tau = (model.tau - step).max(tau_min);
        }
    }
}
