//! First-order optimizers with a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }
}

/// Learning rate `base · 10^(−milestones passed)`, where a milestone is a
/// fraction of the total step count.
pub fn scheduled_rate(base: f64, milestones: &[f64], current_step: usize, total_steps: usize) -> f64 {
    let progress = current_step as f64;
    let passed = milestones
        .iter()
        .filter(|m| progress >= **m * total_steps as f64)
        .count();
    base * 10f64.powi(-(passed as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub milestones: Vec<f64>,
    /// Decoupled: `θ ← θ − lr·wd·θ` on top of the gradient step.
    pub weight_decay: f64,
    step: u64,
    /// First moment (Adam) or velocity (SGD).
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, num_params: usize, base_lr: f64, milestones: Vec<f64>, weight_decay: f64) -> Self {
        let v = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; num_params],
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            kind,
            base_lr,
            milestones,
            weight_decay,
            step: 0,
            m: vec![0.0; num_params],
            v,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn learning_rate(&self, current_step: usize, total_steps: usize) -> f64 {
        scheduled_rate(self.base_lr, &self.milestones, current_step, total_steps)
    }

    /// One update in place.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        current_step: usize,
        total_steps: usize,
    ) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        let lr = self.learning_rate(current_step, total_steps);
        self.step += 1;
        let decay = lr * self.weight_decay;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps) + decay * params[i];
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for i in 0..params.len() {
                    self.m[i] = momentum * self.m[i] + grads[i];
                    params[i] -= lr * self.m[i] + decay * params[i];
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = OptimizerState::new(OptimizerKind::sgd_momentum(), 3, 1e-2, vec![0.6, 0.8], 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3], 0, 10).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn schedule_drops_by_ten_at_each_milestone() {
        let m = [0.6, 0.8];
        assert_eq!(scheduled_rate(1e-2, &m, 0, 100), 1e-2);
        assert!((scheduled_rate(1e-2, &m, 61, 100) - 1e-3).abs() < 1e-18);
        assert!((scheduled_rate(1e-2, &m, 80, 100) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn first_adam_step_is_signed_lr() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 2, 0.1, vec![], 0.0);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.25], 0, 10).unwrap();
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε)
        assert!((p[0] + 0.1 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 0.1 * 0.25 / (0.25 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decoupled_weight_decay_shrinks() {
        let mut opt = OptimizerState::new(OptimizerKind::sgd_momentum(), 1, 0.1, vec![], 0.5);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0, 10).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 2, 0.1, vec![], 0.0);
        let mut p = vec![0.0; 3];
        assert!(matches!(
            opt.step(&mut p, &[0.0; 3], 0, 1),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
