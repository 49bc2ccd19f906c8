use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_params(params: &[&Tensor<T>]) -> Self {
        Self {
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update using each tensor's accumulated gradient.
///
/// Tensors without a gradient slot are treated as having a zero gradient.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if state.first.len() != params.len() || state.second.len() != params.len() {
        return Err(TensorError::Shape(format!(
            "optimizer tracks {} tensors, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.first[i].len() != p.len() || state.second[i].len() != p.len() {
            return Err(TensorError::Shape(format!(
                "optimizer moment {i} does not match parameter of length {}",
                p.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let corr1 = T::of(1.0 - cfg.beta1.powi(t));
    let corr2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let tensor: &mut Tensor<T> = p;
        let Some(grad) = tensor.grad.as_ref() else { continue };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, (w, &g)) in tensor.data.iter_mut().zip(grad).enumerate() {
            m[j] = b1 * m[j] + c1 * g;
            v[j] = b2 * v[j] + c2 * g * g;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
