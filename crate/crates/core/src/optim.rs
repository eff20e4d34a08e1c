//! AdamW with decoupled weight decay, plus the linear learning-rate decay
//! schedule used by every training pipeline.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter moment accumulators keyed by tensor name, plus the shared
/// step counter and hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: HashMap<String, Vec<f64>>,
    second_moment: HashMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(base_lr: f64, weight_decay: f64) -> OptimizerState {
        OptimizerState {
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    /// One decoupled-weight-decay update with bias correction over the given
    /// parameters at learning rate `lr_now`.
    ///
    /// Tensors with `trainable == false` are left bit-identical. A trainable
    /// tensor without a populated gradient is a usage error: the caller is
    /// expected to pass exactly the parameters participating in the step.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr_now: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::Usage(format!("adamw step on trainable {} with no gradient", p.name))
            })?;
            let m = self
                .first_moment
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.data.len()]);
            let v = self
                .second_moment
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.data.len()]);
            if m.len() != p.data.len() {
                return Err(Error::Shape(format!(
                    "optimizer state for {} has {} entries, tensor has {}",
                    p.name,
                    m.len(),
                    p.data.len()
                )));
            }
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                // decoupled decay: applied to the value, not the gradient
                p.data[j] -= lr_now * (m_hat / (v_hat.sqrt() + self.epsilon)
                    + self.weight_decay * p.data[j]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    LinearDecay,
    Constant,
}

/// `base_lr * (1 - step/total_steps)`; reaches zero exactly at `total_steps`.
pub fn linear_decay_schedule(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("linear decay schedule with zero total steps".into()));
    }
    if step > total_steps {
        return Err(Error::Usage(format!("schedule step {step} past total {total_steps}")));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

pub fn schedule_lr(schedule: Schedule, step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    match schedule {
        Schedule::LinearDecay => linear_decay_schedule(step, total_steps, base_lr),
        Schedule::Constant => Ok(base_lr),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_closed_form() {
        // m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1
        // w' = 1 - 0.1 * 1/(1 + 1e-8)
        let mut w = Tensor::from_vec("w", &[1, 1], vec![1.0]).unwrap();
        w.grad = Some(vec![1.0]);
        let mut st = OptimizerState::new(0.1, 0.0);
        st.step(&mut [&mut w], 0.1).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((w.data[0] - expect).abs() < 1e-15, "{} vs {}", w.data[0], expect);
        assert!((w.data[0] - 0.9).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut w = Tensor::from_vec("w", &[1, 2], vec![0.25, -0.75]).unwrap();
        w.grad = Some(vec![0.0, 0.0]);
        let before = w.data.clone();
        let mut st = OptimizerState::new(0.1, 0.0);
        st.step(&mut [&mut w], 0.1).unwrap();
        assert_eq!(w.data, before);
    }

    #[test]
    fn frozen_tensor_untouched_bit_for_bit() {
        let mut w = Tensor::from_vec("w", &[1, 2], vec![0.1, -0.2]).unwrap().frozen();
        w.grad = Some(vec![5.0, 5.0]);
        let before: Vec<u64> = w.data.iter().map(|v| v.to_bits()).collect();
        let mut st = OptimizerState::new(0.1, 0.01);
        st.step(&mut [&mut w], 0.1).unwrap();
        let after: Vec<u64> = w.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn missing_grad_on_trainable_is_usage_error() {
        let mut w = Tensor::from_vec("w", &[1, 1], vec![1.0]).unwrap();
        let mut st = OptimizerState::new(0.1, 0.0);
        assert!(matches!(st.step(&mut [&mut w], 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn decay_moves_even_with_zero_grad() {
        let mut w = Tensor::from_vec("w", &[1, 1], vec![1.0]).unwrap();
        w.grad = Some(vec![0.0]);
        let mut st = OptimizerState::new(0.1, 0.5);
        st.step(&mut [&mut w], 0.1).unwrap();
        assert!((w.data[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn linear_decay_endpoints() {
        assert_eq!(linear_decay_schedule(0, 10, 3.0).unwrap(), 3.0);
        assert_eq!(linear_decay_schedule(10, 10, 3.0).unwrap(), 0.0);
        assert_eq!(linear_decay_schedule(5, 10, 3.0).unwrap(), 1.5);
        assert!(matches!(linear_decay_schedule(0, 0, 3.0), Err(Error::Config(_))));
    }
}
