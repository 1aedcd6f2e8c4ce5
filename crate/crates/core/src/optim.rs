//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(numel: usize, config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: vec![T::ZERO; numel],
            v: vec![T::ZERO; numel],
            config,
        }
    }
}

/// One Adam step on `param` in place.
pub fn adam_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.numel() {
        return Err(Error::contract(format!(
            "adam: param {:?}, grad {:?}, state of {}",
            param.shape(),
            grad.shape(),
            state.m.len()
        )));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let step_size = T::from_f64(lr / (1.0 - beta1.powi(t)));
    let v_correction = T::from_f64(1.0 / (1.0 - beta2.powi(t)));
    let (b1, b2, eps) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps));
    let (one_b1, one_b2) = (T::ONE - b1, T::ONE - b2);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        *p -= step_size * *m / ((*v * v_correction).sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Tensor<f64> {
        Tensor::new(&[values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_param_and_advances_step() {
        let mut p = param(&[0.5, -1.0, 2.0]);
        let g = param(&[0.0; 3]);
        let mut st = AdamState::new(3, AdamConfig::default());
        adam_update(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0, 2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * 1 / (1 + eps).
        let cfg = AdamConfig::default();
        let expected = cfg.lr / (1.0 + cfg.eps);
        let mut p = param(&[0.0; 4]);
        let g = param(&[1.0; 4]);
        let mut st = AdamState::new(4, cfg);
        adam_update(&mut p, &g, &mut st).unwrap();
        for &x in p.data() {
            assert!((x + expected).abs() < 1e-15, "{x}");
            assert!((x + 1e-4).abs() < 1e-11);
        }
    }

    #[test]
    fn repeated_steps_move_against_gradient_sign() {
        let mut p = param(&[0.0, 0.0]);
        let g = param(&[1.0, -3.0]);
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut prev = p.data().to_vec();
        for _ in 0..2 {
            adam_update(&mut p, &g, &mut st).unwrap();
            assert!(p.data()[0] < prev[0]);
            assert!(p.data()[1] > prev[1]);
            prev = p.data().to_vec();
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = param(&[0.0, 0.0]);
        let g = param(&[1.0]);
        let mut st = AdamState::new(2, AdamConfig::default());
        assert!(adam_update(&mut p, &g, &mut st).is_err());
    }
}
