use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `params - lr * grads`.
pub fn sgd_step(params: &Tensor, grads: &Tensor, lr: f64) -> Result<Tensor> {
    if params.shape() != grads.shape() {
        return Err(Error::shape("sgd_step", params.shape(), grads.shape()));
    }
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("sgd step size must be > 0, got {lr}")));
    }
    let data = params
        .data()
        .iter()
        .zip(grads.data())
        .map(|(p, g)| p - lr * g)
        .collect();
    Ok(Tensor::from_parts(params.shape().to_vec(), data))
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_tensor(t: &Tensor) -> Self {
        AdamState::new(t.len())
    }

    /// In-place bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape("adam_step", &[self.m.len()], &[params.len(), grads.len()]));
        }
        if !(lr > 0.0) {
            return Err(Error::Contract(format!("adam step size must be > 0, got {lr}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional Adam step: returns the updated parameters and state.
pub fn adam_step(
    params: &Tensor,
    grads: &Tensor,
    state: &AdamState,
    lr: f64,
) -> Result<(Tensor, AdamState)> {
    if params.shape() != grads.shape() {
        return Err(Error::shape("adam_step", params.shape(), grads.shape()));
    }
    let mut next = params.clone();
    let mut st = state.clone();
    st.update(next.data_mut(), grads.data(), lr)?;
    Ok((next, st))
}

/// One Adam state per tensor of a parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Adam {
            lr,
            states: params.iter().map(AdamState::for_tensor).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(Error::Contract("adam: parameter list length changed".into()));
        }
        for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut self.states) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            st.update(p.data_mut(), g.data(), self.lr)?;
        }
        Ok(())
    }
}
