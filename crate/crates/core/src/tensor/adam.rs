//! Adam optimizer state and the single-parameter update step.

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-parameter Adam moments plus the hyperparameters in effect.
///
/// Weight decay is applied as a classic L2 term folded into the gradient
/// (`grad + weight_decay · param`) before the moment updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    /// First moment, same shape as the parameter.
    pub m: Vec<f64>,
    /// Second moment, same shape as the parameter, elementwise ≥ 0.
    pub v: Vec<f64>,
    /// Number of steps applied so far.
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(param_numel: usize, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            m: vec![0.0; param_numel],
            v: vec![0.0; param_numel],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Elementwise average of several states; the step counter is averaged
    /// and floored so bias correction stays conservative.
    pub fn average(states: &[&AdamState]) -> Result<AdamState> {
        let first = states
            .first()
            .ok_or_else(|| Error::contract("average of zero Adam states"))?;
        let n = states.len() as f64;
        if states.iter().any(|s| s.m.len() != first.m.len()) {
            return Err(Error::contract("Adam states with differing shapes"));
        }
        let mut m = vec![0.0; first.m.len()];
        let mut v = vec![0.0; first.v.len()];
        for s in states {
            for (acc, x) in m.iter_mut().zip(&s.m) {
                *acc += x / n;
            }
            for (acc, x) in v.iter_mut().zip(&s.v) {
                *acc += x / n;
            }
        }
        let t = (states.iter().map(|s| s.t as f64).sum::<f64>() / n).floor() as u64;
        Ok(AdamState {
            m,
            v,
            t,
            lr: states.iter().map(|s| s.lr).sum::<f64>() / n,
            beta1: states.iter().map(|s| s.beta1).sum::<f64>() / n,
            beta2: states.iter().map(|s| s.beta2).sum::<f64>() / n,
            eps: states.iter().map(|s| s.eps).sum::<f64>() / n,
            weight_decay: states.iter().map(|s| s.weight_decay).sum::<f64>() / n,
        })
    }
}

/// One Adam update with bias correction. Returns the new parameter and the
/// advanced state; the inputs are left untouched.
pub fn adam_step(param: &Tensor, grad: &Tensor, state: &AdamState) -> Result<(Tensor, AdamState)> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "adam_step: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    if param.numel() != state.m.len() {
        return Err(Error::contract(
            "adam_step: state moments do not match parameter size",
        ));
    }
    if grad.has_nan() {
        return Err(Error::numeric("adam_step: NaN/Inf in gradient"));
    }

    let mut next = state.clone();
    next.t = state.t + 1;
    let bc1 = 1.0 - state.beta1.powi(next.t as i32);
    let bc2 = 1.0 - state.beta2.powi(next.t as i32);

    let mut out = param.clone().with_requires_grad(param.requires_grad());
    for k in 0..param.numel() {
        let g = grad.data()[k] + state.weight_decay * param.data()[k];
        next.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        next.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = next.m[k] / bc1;
        let v_hat = next.v[k] / bc2;
        out.data_mut()[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok((out, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(vec![3]);
        let s = AdamState::new(3, 0.1, 0.0);
        let (p2, s2) = adam_step(&p, &g, &s).unwrap();
        assert_eq!(p2.data(), p.data());
        assert_eq!(s2.t, 1);
        assert!(s2.m.iter().all(|&x| x == 0.0));
        assert!(s2.v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_matches_inline_recurrence() {
        let p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut s = AdamState::new(1, 0.1, 0.0);
        s.beta1 = 0.9;
        s.beta2 = 0.999;
        s.eps = 1e-8;
        let (p2, s2) = adam_step(&p, &g, &s).unwrap();

        // inline oracle: evaluate the recurrence by hand
        let m = 0.9 * 0.0 + 0.1 * 1.0;
        let v = 0.999 * 0.0 + 0.001 * 1.0;
        let m_hat = m / (1.0 - 0.9_f64.powi(1));
        let v_hat = v / (1.0 - 0.999_f64.powi(1));
        let expect = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);

        assert!((p2.data()[0] - expect).abs() < 1e-12);
        assert_eq!(s2.t, 1);
    }

    #[test]
    fn two_steps_move_against_gradient() {
        let p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let s = AdamState::new(2, 0.05, 0.0);
        let (p1, s1) = adam_step(&p, &g, &s).unwrap();
        let (p2, s2) = adam_step(&p1, &g, &s1).unwrap();
        assert_eq!(s2.t, 2);
        // strictly monotone in the −grad direction
        assert!(p1.data()[0] < p.data()[0] && p2.data()[0] < p1.data()[0]);
        assert!(p1.data()[1] > p.data()[1] && p2.data()[1] > p1.data()[1]);
    }

    #[test]
    fn nan_gradient_is_numeric_error() {
        let p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let s = AdamState::new(1, 0.1, 0.0);
        assert!(matches!(
            adam_step(&p, &g, &s),
            Err(crate::error::Error::Numeric(_))
        ));
    }

    #[test]
    fn state_average_floors_step_counter() {
        let mut a = AdamState::new(2, 0.1, 0.0);
        a.m = vec![1.0, 2.0];
        a.v = vec![4.0, 8.0];
        a.t = 3;
        let mut b = AdamState::new(2, 0.1, 0.0);
        b.m = vec![3.0, 4.0];
        b.v = vec![0.0, 2.0];
        b.t = 4;
        let avg = AdamState::average(&[&a, &b]).unwrap();
        assert_eq!(avg.m, vec![2.0, 3.0]);
        assert_eq!(avg.v, vec![2.0, 5.0]);
        assert_eq!(avg.t, 3); // floor of 3.5
    }
}
