use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments plus the step count of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Result<Self> {
        Ok(AdamState {
            m: Tensor::zeros(shape)?,
            v: Tensor::zeros(shape)?,
            step: 0,
        })
    }
}

/// One AdamW update: decoupled decay `p ← p·(1 − lr·λ)`, then
/// `p ← p − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.shape() != param.shape() || state.m.shape() != param.shape() || state.v.shape() != param.shape() {
        return Err(Error::shape(format!(
            "adamw: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.step += 1;
    let step = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(step));
    let bc2 = T::of(1.0 - cfg.beta2.powi(step));
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    let one = T::one();
    let p = param.data_mut();
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, &g) in grad.data().iter().enumerate() {
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] * decay;
        p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&[3]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..5 {
            adamw_step(&mut p, &Tensor::zeros(&[3]).unwrap(), &mut s, 0.1, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let mut s = AdamState::new(&[1]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &Tensor::ones(&[1]).unwrap(), &mut s, 0.1, &cfg).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = −0.1/(1 + 1e-8).
        assert!((p.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_over_fifty_steps() {
        let cfg = AdamWConfig::default();
        let lr = 0.01;
        let mut rng = SeededRng::new(8);
        let mut p = Tensor::<f64>::randn(&[4], 1.0, &mut rng).unwrap();
        let mut s = AdamState::new(&[4]).unwrap();
        let mut refp: Vec<f64> = p.data().to_vec();
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        for step in 1..=50 {
            let g = Tensor::<f64>::randn(&[4], 1.0, &mut rng).unwrap();
            adamw_step(&mut p, &g, &mut s, lr, &cfg).unwrap();
            for i in 0..4 {
                let gi = g.data()[i];
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(step));
                let vh = v[i] / (1.0 - 0.999f64.powi(step));
                refp[i] -= lr * 0.01 * refp[i];
                refp[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (&got, &want) in p.data().iter().zip(&refp) {
            assert!((got - want).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_exact() {
        let mut rng = SeededRng::new(9);
        let mut p = Tensor::<f32>::randn(&[6], 1.0, &mut rng).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&[6]).unwrap();
        let g = Tensor::<f32>::randn(&[6], 1.0, &mut rng).unwrap();
        adamw_step(&mut p, &g, &mut s, 0.0, &AdamWConfig::default()).unwrap();
        assert_eq!(p, before);
    }
}
