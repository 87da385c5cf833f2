use serde::{Deserialize, Serialize};

use crate::autodiff::graph::ParamRegistry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter tensor plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(registry: &ParamRegistry<T>) -> Self {
        Self {
            step: 0,
            m: registry.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
            v: registry.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `registry`.
/// A missing gradient buffer counts as zero. The step is rejected before any
/// parameter moves if a gradient entry is non-finite.
pub fn adam_step<T: Scalar>(registry: &mut ParamRegistry<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != registry.len() || registry.iter().zip(&state.m).any(|(p, m)| p.tensor.len() != m.len()) {
        return Err(Error::shape("adam", "optimizer state does not match parameters"));
    }
    for p in registry.iter() {
        if let Some(g) = p.tensor.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for ((p, m), v) in registry.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.tensor.grad().map(|g| g.to_vec());
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::Graph;

    fn scalar_registry(value: f64) -> ParamRegistry<f64> {
        let mut g = Graph::<f64>::new("s");
        let x = g.input("x", &[1]);
        g.linear("fc", x, 1).unwrap();
        let mut r = g.params().clone();
        r.at_mut(0).tensor.data_mut()[0] = value;
        r
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut r = scalar_registry(0.7);
        r.iter_mut().for_each(|p| {
            p.tensor.grad_mut();
        });
        let before = r.clone();
        let mut s = AdamState::new(&r);
        adam_step(&mut r, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.step, 1);
        for (a, b) in r.iter().zip(before.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn first_step_is_unit_scaled() {
        let mut r = scalar_registry(1.0);
        r.at_mut(0).tensor.grad_mut()[0] = 1.0;
        let mut s = AdamState::new(&r);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut r, &mut s, &cfg).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        let moved = 1.0 - r.at(0).tensor.data()[0];
        assert!((moved - 0.1).abs() < 1e-8, "{moved}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut r = scalar_registry(1.0);
        r.at_mut(1).tensor.grad_mut()[0] = f64::NAN;
        let mut s = AdamState::new(&r);
        let err = adam_step(&mut r, &mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("s.fc.bias"), "{err}");
        assert_eq!(s.step, 0);
        assert_eq!(r.at(0).tensor.data()[0], 1.0);
    }
}
