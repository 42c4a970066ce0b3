//! Adam optimizer state and update step.

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Tensor};

/// Per-parameter Adam accumulators. `step` counts completed updates.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state shaped like `param`, with the standard β1=0.9, β2=0.999,
    /// ε=1e-8 defaults.
    pub fn new(param: &Tensor) -> Self {
        AdamState {
            m: vec![0.0; param.numel()],
            v: vec![0.0; param.numel()],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam descent step. Returns the updated parameter;
/// the moment accumulators and step counter mutate in place.
pub fn adam_step(param: &Tensor, grad: &Tensor, state: &mut AdamState, lr: f64) -> Result<Tensor> {
    if param.dims() != grad.dims() || param.numel() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: param.dims().to_vec(),
            rhs: grad.dims().to_vec(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut data = Vec::with_capacity(param.numel());
    for i in 0..param.numel() {
        let g = grad.data()[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data.push(param.data()[i] - lr * m_hat / (v_hat.sqrt() + state.epsilon));
    }
    ensure_finite("adam_step", &data)?;
    Tensor::new(param.dims().to_vec(), data)
}
