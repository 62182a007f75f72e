// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor optimizer state (first/second moments and step counter).
#[derive(Debug, Clone)]
pub struct AdamState<E: Scalar> {
    pub m: Vec<E>,
    pub v: Vec<E>,
    pub step: usize,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![E::ZERO; len],
            v: vec![E::ZERO; len],
            step: 0,
        }
    }
}

/// Standard bias-corrected Adam update, applied elementwise in place.
pub fn adam_step<E: Scalar>(
    params: &mut [E],
    grads: &[E],
    state: &mut AdamState<E>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::Shape(format!(
            "adam_step: params {} grads {} state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let one_m_b1 = E::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = E::from_f64(1.0 - cfg.beta2);
    let bc1 = E::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = E::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = E::from_f64(cfg.lr);
    let eps = E::from_f64(cfg.eps);

    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + one_m_b1 * g;
        state.v[i] = b2 * state.v[i] + one_m_b2 * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0, 0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn one_step_hand_evaluated() {
        // grad=[1], lr=0.1, defaults: bias-corrected m_hat=1, v_hat=1,
        // delta = -0.1 * 1/(1 + 1e-8) ~ -0.1
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut p, &[1.0], &mut st, &cfg).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        // Adam asymptote: |delta| -> lr for a constant gradient.
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut prev = p[0];
        let mut last_delta = 0.0;
        for _ in 0..500 {
            adam_step(&mut p, &[3.0], &mut st, &cfg).unwrap();
            last_delta = p[0] - prev;
            prev = p[0];
        }
        assert!((last_delta.abs() - 0.05).abs() < 1e-3);
        assert!(last_delta < 0.0); // moves against the gradient sign
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = vec![0.0f64; 2];
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut st, &AdamConfig::default()).is_err());
    }
}
