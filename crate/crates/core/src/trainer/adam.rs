use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates and the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr · m̂ / (√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
///
/// Gradients are finite by construction of [`Tensor`]; an update that
/// overflows is reported as a tensor error.
pub fn adam_step<T: Element>(
    params: &Tensor<T>,
    grads: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    config: &AdamConfig,
) -> Result<Tensor<T>> {
    if params.shape() != grads.shape()
        || state.m.len() != params.len()
        || state.v.len() != params.len()
    {
        return Err(TrainError::Config(format!(
            "adam: params {:?}, grads {:?}, state of {} entries",
            params.shape(),
            grads.shape(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let c1 = T::lit(1.0 - config.beta1.powi(t));
    let c2 = T::lit(1.0 - config.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(config.eps));
    let data = params
        .data()
        .iter()
        .zip(grads.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .map(|((&p, &g), (m, v))| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            p - lr * m_hat / (v_hat.sqrt() + eps)
        })
        .collect();
    Ok(Tensor::new(params.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1], &[v]).unwrap()
    }

    #[test]
    fn first_step_has_unit_normalized_magnitude() {
        let mut state = AdamState::new(1);
        let out = adam_step(
            &scalar(1.0),
            &scalar(2.0),
            &mut state,
            1e-3,
            &AdamConfig::default(),
        )
        .unwrap();
        assert!((out.data()[0] - 0.999).abs() < 1e-10);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut state = AdamState::new(2);
        let p = Tensor::from_f64(vec![2], &[0.5, -3.0]).unwrap();
        let g = Tensor::<f64>::zeros(vec![2]).unwrap();
        let out = adam_step(&p, &g, &mut state, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn minimizes_a_parabola() {
        // scalar recurrence on f(θ) = θ², g = 2θ
        let mut theta = scalar(1.0);
        let mut state = AdamState::new(1);
        for _ in 0..1000 {
            let g = scalar(2.0 * theta.data()[0]);
            theta = adam_step(&theta, &g, &mut state, 1e-2, &AdamConfig::default()).unwrap();
        }
        assert!(theta.data()[0].abs() < 0.05, "θ = {}", theta.data()[0]);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut state = AdamState::new(1);
        let g = Tensor::<f64>::zeros(vec![2]).unwrap();
        assert!(adam_step(&scalar(1.0), &g, &mut state, 1e-3, &AdamConfig::default()).is_err());
    }
}
