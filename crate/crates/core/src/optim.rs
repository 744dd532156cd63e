//! Adam with bias correction.

use crate::params::ParamStore;
use crate::tensor::{Element, Tensor, TensorError};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update using the gradients held in `params`.
pub fn adam_step<T: Element>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<(), TensorError> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.value.shape() != m.shape() || p.grad.shape() != p.value.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "parameter {} {:?} vs optimizer state {:?}",
                p.name,
                p.value.shape(),
                m.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        for (((w, mi), vi), &gi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            let gf = gi.f64();
            let mf = b1 * mi.f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.f64() + (1.0 - b2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
            *w = T::of(w.f64() - update);
        }
    }
    Ok(())
}
