//! SGD with momentum.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Momentum buffer and step constants for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl SgdState {
    pub fn new(len: usize, learning_rate: f64, momentum: f64) -> Self {
        Self {
            velocity: vec![0.0; len],
            learning_rate,
            momentum,
        }
    }
}

/// `v <- momentum * v + grad; param <- param - lr * v`.
pub fn sgd_momentum_step(param: &mut Tensor, grad: &[f64], state: &mut SgdState) -> Result<()> {
    sgd_momentum_step_slice(param.data_mut(), grad, state)
}

pub fn sgd_momentum_step_slice(param: &mut [f64], grad: &[f64], state: &mut SgdState) -> Result<()> {
    for (len, what) in [(grad.len(), "sgd gradient"), (state.velocity.len(), "sgd velocity")] {
        if len != param.len() {
            return Err(Error::ShapeMismatch {
                op: what,
                axis: 0,
                expected: param.len(),
                found: len,
            });
        }
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((p, v), &g) in param.iter_mut().zip(&mut state.velocity).zip(grad) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut s = SgdState::new(1, 0.001, 0.1);
        sgd_momentum_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-15);
        assert_eq!(s.velocity, vec![1.0]);
    }

    #[test]
    fn second_step_accumulates_momentum() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut s = SgdState::new(1, 0.001, 0.1);
        sgd_momentum_step(&mut p, &[1.0], &mut s).unwrap();
        let before = p.data()[0];
        sgd_momentum_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((s.velocity[0] - 1.1).abs() < 1e-15);
        assert!((before - p.data()[0] - 0.0011).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_coasts_on_velocity() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut s = SgdState::new(1, 0.001, 0.1);
        s.velocity[0] = 1.0;
        sgd_momentum_step(&mut p, &[0.0], &mut s).unwrap();
        assert!((1.0 - p.data()[0] - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let mut s = SgdState::new(2, 0.1, 0.9);
        assert!(matches!(
            sgd_momentum_step(&mut p, &[1.0], &mut s),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
