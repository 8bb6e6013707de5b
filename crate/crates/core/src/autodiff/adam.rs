//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::TensorError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for the given parameter sizes, with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self::with_hyper(sizes, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(sizes: impl IntoIterator<Item = usize>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m,
            v,
        }
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<(), TensorError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(TensorError::invalid("adam_step", format!("learning rate {lr} must be > 0")));
        }
        self.update(params, grads, lr)
    }

    /// Like [`AdamState::step`] but also accepts `lr == 0`, which advances the
    /// moments and step counter without moving the parameters.
    pub fn step_allow_zero(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<(), TensorError> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(TensorError::invalid("adam_step", format!("learning rate {lr} must be >= 0")));
        }
        self.update(params, grads, lr)
    }

    fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TensorError::invalid(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(TensorError::mismatch("adam_step", p.shape(), &[g.len()]));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
