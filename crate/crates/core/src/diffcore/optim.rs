//! AdamW with a single step-down learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Constant rate, multiplied by `factor` from `drop_epoch` onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub drop_epoch: Option<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            drop_epoch: None,
            factor: 1.0,
        }
    }

    /// Drop by 10x at epoch `ceil(11/12 * epochs)` (zero-based).
    pub fn step_down(base: f64, epochs: usize) -> Self {
        Self {
            base,
            drop_epoch: Some(default_drop_epoch(epochs)),
            factor: 0.1,
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        match self.drop_epoch {
            Some(drop) if epoch >= drop => self.base * self.factor,
            _ => self.base,
        }
    }
}

pub fn default_drop_epoch(epochs: usize) -> usize {
    (11 * epochs).div_ceil(12)
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamW,
    pub lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepReport {
    pub updated: usize,
    pub skipped: usize,
}

impl OptimizerState {
    pub fn new(config: AdamW, lr: f64) -> Self {
        Self {
            config,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_epoch(&mut self, schedule: &LrSchedule, epoch: usize) {
        self.lr = schedule.rate(epoch);
    }
}

/// One AdamW update over every parameter holding a gradient.
///
/// Weight decay is decoupled: values shrink by `lr * weight_decay` before
/// the moment-based update is applied. Parameters without a gradient are
/// left untouched and counted in [`StepReport::skipped`].
pub fn optimizer_step(params: &mut ParamStore, state: &mut OptimizerState) -> StepReport {
    let mut report = StepReport::default();
    if params.is_empty() {
        return report;
    }
    if state.first.len() != params.len() {
        state.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    state.step += 1;
    let AdamW {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let lr = state.lr;
    for (i, p) in params.iter_mut().enumerate() {
        let Some(grad) = p.grad.take() else {
            report.skipped += 1;
            continue;
        };
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let values = p.value_mut();
        for j in 0..values.len() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            values[j] *= 1.0 - lr * weight_decay;
            values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad = Some(grad);
        report.updated += 1;
    }
    report
}
