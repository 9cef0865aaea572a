//! Adaptive-moment gradient descent over named parameter lists.

use serde::{Deserialize, Serialize};

use super::{NumResult, Tensor};

/// First/second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Plain Adam. Parameter order is fixed by the caller, so updates are
/// deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub state: Vec<AdamState>,
}

impl Adam {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: param_sizes
                .iter()
                .map(|n| AdamState { m: vec![0.0; *n], v: vec![0.0; *n] })
                .collect(),
        }
    }

    /// Advance the step counter; call once before a round of
    /// [`Adam::update_param`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter slot in the current step. Skipped slots (no
    /// gradient) keep their value and moments untouched.
    pub fn update_param(&mut self, slot: usize, param: &mut Tensor, grad: &[f64]) -> NumResult<()> {
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let state = &mut self.state[slot];
        let mut vals = param.values().to_vec();
        assert_eq!(vals.len(), grad.len(), "gradient length mismatch in slot {slot}");
        for i in 0..vals.len() {
            let g = grad[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = state.m[i] / bc1;
            let vhat = state.v[i] / bc2;
            vals[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        param.set_values(vals)
    }

    /// Apply one update over a full parameter list. A `None` gradient leaves
    /// the parameter untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>]) -> NumResult<()> {
        assert_eq!(params.len(), self.state.len(), "optimizer/parameter count mismatch");
        assert_eq!(params.len(), grads.len(), "gradient/parameter count mismatch");
        self.begin_step();
        for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if let Some(grad) = grad {
                self.update_param(slot, param, grad)?;
            }
        }
        Ok(())
    }
}
