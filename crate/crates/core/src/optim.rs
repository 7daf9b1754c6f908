//! Adam and the step-decay learning-rate schedule used for every task.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to every non-frozen parameter
    /// that holds a gradient, then clears all gradients.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if params.is_frozen(id) {
                continue;
            }
            let Some(grad) = params.grad(id).cloned() else {
                continue;
            };
            let (m, v) = self.moments[id.0].get_or_insert_with(|| {
                (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape()))
            });
            let value = params.value_mut(id);
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        params.zero_grad();
    }
}

/// Learning rate multiplied by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// Halving at 40%, 60% and 80% of the run: epochs 20/30/40 of 50,
    /// rescaled proportionally for shorter runs.
    pub fn halving(initial: f64, epochs: usize) -> Self {
        let mut milestones: Vec<usize> = [0.4, 0.6, 0.8]
            .iter()
            .map(|f| ((epochs as f64) * f).round() as usize)
            .filter(|&m| m > 0 && m < epochs)
            .collect();
        milestones.dedup();
        Self {
            initial,
            milestones,
            factor: 0.5,
        }
    }

    /// Rate in effect during zero-based `epoch`.
    pub fn rate(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(passed as i32)
    }
}
