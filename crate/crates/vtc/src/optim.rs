//! Deterministic Adam with fixed hyperparameters. State is keyed by the same
//! dotted names used for tape registration and checkpoints. Updates are
//! elementwise, so parameter iteration order cannot affect the result.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Call once per optimization step, before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one Adam update to a named tensor. A `None` gradient means the
    /// parameter was not registered on the tape (frozen) and is left alone.
    pub fn update(&mut self, name: &str, tensor: &mut Tensor, grad: Option<&[f64]>) {
        let Some(grad) = grad else { return };
        assert_eq!(
            grad.len(),
            tensor.numel(),
            "gradient shape mismatch for {name}"
        );
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
