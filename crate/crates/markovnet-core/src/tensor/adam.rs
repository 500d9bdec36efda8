//! Adam with bias correction, deterministic given identical inputs.

use super::Tensor;
use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamState<R> {
    pub learning_rate: R,
    pub beta1: R,
    pub beta2: R,
    pub epsilon: R,
    pub step_count: u64,
    first_moment: Vec<Vec<R>>,
    second_moment: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    /// Default hyperparameters: lr 1e-3, β₁ 0.9, β₂ 0.999, ε 1e-8.
    pub fn new(param_sizes: &[usize]) -> Self {
        Self::with_learning_rate(1e-3, param_sizes)
    }

    pub fn with_learning_rate(lr: f64, param_sizes: &[usize]) -> Self {
        AdamState {
            learning_rate: R::of(lr),
            beta1: R::of(0.9),
            beta2: R::of(0.999),
            epsilon: R::of(1e-8),
            step_count: 0,
            first_moment: param_sizes.iter().map(|&s| vec![R::zero(); s]).collect(),
            second_moment: param_sizes.iter().map(|&s| vec![R::zero(); s]).collect(),
        }
    }
}

/// One Adam update over a parameter list. `grads[i]` must be present and
/// match `params[i]` element for element; a missing gradient is a contract
/// violation.
pub fn adam_step<R: Real>(
    params: &mut [&mut Tensor<R>],
    grads: &[Option<Vec<R>>],
    state: &mut AdamState<R>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::contract(format!(
            "adam_step arity mismatch: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = R::one() - state.beta1.powi(t);
    let bc2 = R::one() - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);

    for (idx, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        let g = grad
            .as_ref()
            .ok_or_else(|| Error::contract(format!("adam_step: parameter {idx} has no gradient")))?;
        if g.len() != param.numel() {
            return Err(Error::contract(format!(
                "adam_step: gradient length {} does not match parameter {idx} ({})",
                g.len(),
                param.numel()
            )));
        }
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        for (i, w) in param.data_mut().iter_mut().enumerate() {
            let gi = g[i];
            m[i] = b1 * m[i] + (R::one() - b1) * gi;
            v[i] = b2 * v[i] + (R::one() - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![0.5f64, -0.25, 1.0]).unwrap();
        let before = p.data().to_vec();
        let mut state = AdamState::new(&[3]);
        adam_step(&mut [&mut p], &[Some(vec![0.0; 3])], &mut state).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With constant gradient 1, bias correction makes m̂ = 1, v̂ = 1, so
        // the first step is lr/(1 + ε) ≈ lr.
        let mut p = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        let mut state = AdamState::new(&[1]);
        adam_step(&mut [&mut p], &[Some(vec![1.0])], &mut state).unwrap();
        assert!((p.data()[0] + 1e-3).abs() < 1e-9, "got {}", p.data()[0]);
    }

    #[test]
    fn missing_gradient_is_a_contract_violation() {
        let mut p = Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap();
        let mut state = AdamState::new(&[2]);
        let r = adam_step(&mut [&mut p], &[None], &mut state);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = w², df/dw = 2w, starting from 0.1.
        let mut w = Tensor::from_vec(&[1], vec![0.1f64]).unwrap();
        let mut state = AdamState::new(&[1]);
        for _ in 0..500 {
            let g = vec![2.0 * w.data()[0]];
            adam_step(&mut [&mut w], &[Some(g)], &mut state).unwrap();
        }
        assert!(w.data()[0].abs() < 1e-3, "w = {}", w.data()[0]);
    }
}
