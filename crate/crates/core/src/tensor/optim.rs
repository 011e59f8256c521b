//! ADAM (with bias correction) and a plain-SGD hook used by tests to verify
//! scheduler algebra without adaptive scaling.

use super::Tensor;
use crate::error::{Error, Result};

/// ADAM state for one parameter group, aligned index-by-index with the
/// parameter list it was created from.
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Moment buffers flattened for checkpointing, in parameter order.
    pub fn buffers(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (self.m.clone(), self.v.clone())
    }

    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step_count: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::InvalidInput(
                "optimizer state has wrong parameter count".into(),
            ));
        }
        for (cur, new) in self.m.iter().zip(m.iter()) {
            if cur.len() != new.len() {
                return Err(Error::InvalidInput(
                    "optimizer state has wrong buffer length".into(),
                ));
            }
        }
        self.m = m;
        self.v = v;
        self.step_count = step_count;
        Ok(())
    }
}

/// One ADAM update over a parameter group. Every parameter must carry a
/// gradient; gradients are left untouched (callers clear them).
pub fn adam_step(params: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::InvalidInput(format!(
            "adam_step: {} params vs state for {}",
            params.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGradient(format!("group index {i}")));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter().enumerate() {
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        p.apply_step(|data, grad| {
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        })?;
    }
    Ok(())
}

/// Plain gradient descent over a parameter group (test hook).
pub struct SgdState {
    pub step_count: u64,
}

impl SgdState {
    pub fn new() -> SgdState {
        SgdState { step_count: 0 }
    }
}

impl Default for SgdState {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sgd_step(params: &[Tensor], state: &mut SgdState, lr: f64) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGradient(format!("group index {i}")));
        }
    }
    state.step_count += 1;
    for p in params {
        p.apply_step(|data, grad| {
            for j in 0..data.len() {
                data[j] -= lr * grad[j];
            }
        })?;
    }
    Ok(())
}

/// Optimizer for one parameter group; ADAM for real runs, SGD as a test hook.
pub enum Optimizer {
    Adam(AdamState),
    Sgd(SgdState),
}

impl Optimizer {
    pub fn adam(params: &[Tensor]) -> Optimizer {
        Optimizer::Adam(AdamState::new(params))
    }

    pub fn sgd() -> Optimizer {
        Optimizer::Sgd(SgdState::new())
    }

    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(params, state, lr),
            Optimizer::Sgd(state) => sgd_step(params, state, lr),
        }
    }

    /// Number of applied updates.
    pub fn step_count(&self) -> u64 {
        match self {
            Optimizer::Adam(state) => state.step_count,
            Optimizer::Sgd(state) => state.step_count,
        }
    }
}

/// Clear the gradient buffers of a parameter group.
pub fn zero_grad(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}
