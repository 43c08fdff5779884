//! Adam with bias correction, organised as parameter groups so the
//! backbone, classifier head, and register bank can train at different
//! learning rates.

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update on a single parameter buffer.
///
/// `t` is the 1-based step count *after* this update. Exposed as a free
/// function so tests can evaluate the recurrence by hand.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hyper: &AdamHyper,
) {
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.epsilon);
    }
}

struct Slot {
    param: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    lr: f64,
}

/// Optimizer state: first/second moment buffers per parameter plus a
/// strictly increasing step counter.
pub struct Adam {
    slots: Vec<Slot>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            slots: Vec::new(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Register a group of parameters sharing one learning rate.
    pub fn add_group(&mut self, params: &[Tensor], lr: f64) {
        for p in params {
            let n = p.numel();
            self.slots.push(Slot {
                param: p.clone(),
                m: vec![0.0; n],
                v: vec![0.0; n],
                lr,
            });
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn zero_grad(&self) {
        for s in &self.slots {
            s.param.zero_grad();
        }
    }

    /// Apply one update using each parameter's accumulated gradient.
    /// Parameters that received no gradient this step are treated as
    /// having a zero gradient.
    pub fn step(&mut self) -> Result<(), TensorError> {
        self.step_count += 1;
        let t = self.step_count;
        for s in &mut self.slots {
            let grad = s.param.grad().unwrap_or_else(|| vec![0.0; s.param.numel()]);
            if grad.len() != s.param.numel() {
                return Err(TensorError::Invalid {
                    op: "adam_step",
                    msg: format!(
                        "gradient length {} does not match parameter {:?}",
                        grad.len(),
                        s.param.shape()
                    ),
                });
            }
            let hyper = AdamHyper {
                lr: s.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            };
            s.param
                .mutate_data(|data| adam_step(data, &grad, &mut s.m, &mut s.v, t, &hyper));
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
