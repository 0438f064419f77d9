use super::{Grads, Params};
use crate::error::{ensure, Result};

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { step_count: 0, m: vec![0.0; len], v: vec![0.0; len], beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    ensure!(
        params.len() == grad.len() && params.len() == state.m.len() && params.len() == state.v.len(),
        Shape,
        "adam: params {}, grad {}, moments {}/{}",
        params.len(),
        grad.len(),
        state.m.len(),
        state.v.len()
    );
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam over a whole [`Params`] store, one moment state per tensor.
///
/// Tensors that received no gradient in a step are skipped entirely (their
/// moments and step count do not advance), so a front-end that took no part
/// in a batch stays bit-identical.
#[derive(Debug, Clone)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        Self { states: params.tensors().iter().map(|t| AdamState::new(t.data.len())).collect() }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Grads, lr: f64) -> Result<()> {
        ensure!(
            grads.len() == params.len() && self.states.len() == params.len(),
            Shape,
            "adam: {} grads / {} states for {} tensors",
            grads.len(),
            self.states.len(),
            params.len()
        );
        for (i, state) in self.states.iter_mut().enumerate() {
            if let Some(g) = grads.get(i) {
                adam_step(&mut params.tensor_mut(i).data, g, state, lr)?;
            }
        }
        Ok(())
    }
}
