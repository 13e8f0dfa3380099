//! Adam with bias correction.

use std::collections::HashMap;

use crate::param::{ParamKey, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
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

#[derive(Clone, Debug)]
struct Moments<T> {
    first: Tensor<T>,
    second: Tensor<T>,
    steps: u64,
}

/// Per-parameter moment estimates. Each parameter keeps its own step count,
/// so parameters that sit frozen for a while resume with correct bias
/// correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    state: HashMap<ParamKey, Moments<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
            steps: 0,
        }
    }

    /// Number of `step` calls so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self, key: &ParamKey) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.state.get(key).map(|m| (&m.first, &m.second))
    }

    /// Updates every trainable parameter that received a gradient, then
    /// clears all gradients in the given stores.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>]) {
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps) = (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.eps));
        for store in stores.iter_mut() {
            let sid = store.id();
            for (index, p) in store.iter_mut().enumerate() {
                if p.trainable && p.has_grad() {
                    let m = self.state.entry(ParamKey { store: sid, index }).or_insert_with(|| Moments {
                        first: Tensor::zeros(p.value.shape().to_vec()),
                        second: Tensor::zeros(p.value.shape().to_vec()),
                        steps: 0,
                    });
                    m.steps += 1;
                    let t = m.steps as i32;
                    let corr1 = T::one() - b1.powi(t);
                    let corr2 = T::one() - b2.powi(t);
                    let grads = p.grad.data();
                    let first = m.first.data_mut();
                    let second = m.second.data_mut();
                    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grads[i];
                        first[i] = b1 * first[i] + (T::one() - b1) * g;
                        second[i] = b2 * second[i] + (T::one() - b2) * g * g;
                        let mhat = first[i] / corr1;
                        let vhat = second[i] / corr2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                p.zero_grad();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Parameter, StoreId};

    fn store_with(value: f64, grad: f64, trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new(StoreId(0));
        s.insert(Parameter::new("w", Tensor::full(vec![3], value), trainable)).unwrap();
        s.get_mut("w").unwrap().accumulate_grad(&Tensor::full(vec![3], grad)).unwrap();
        s
    }

    #[test]
    fn zero_grad_leaves_parameter() {
        let mut s = store_with(0.7, 0.0, true);
        Adam::new(AdamConfig::default()).step(&mut [&mut s]);
        assert_eq!(s.get("w").unwrap().value.data(), &[0.7; 3]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m1 = 0.1 g, v1 = 0.001 g^2; mhat = g, vhat = g^2
        // update = lr * g / (|g| + eps)
        let (g, lr, eps) = (0.25f64, 1e-3, 1e-8);
        let mut s = store_with(1.0, g, true);
        let mut opt = Adam::new(AdamConfig::with_lr(lr));
        opt.step(&mut [&mut s]);
        let m1 = 0.1 * g;
        let v1 = 0.001 * g * g;
        let expected = 1.0 - lr * (m1 / 0.1) / ((v1 / 0.001).sqrt() + eps);
        for &w in s.get("w").unwrap().value.data() {
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
        assert!(!s.get("w").unwrap().has_grad());
    }

    #[test]
    fn frozen_parameter_untouched_for_100_steps() {
        let mut s = store_with(0.3, 1.0, false);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..100 {
            let p = s.get_mut("w").unwrap();
            p.accumulate_grad(&Tensor::full(vec![3], 1.0)).unwrap();
            opt.step(&mut [&mut s]);
        }
        assert_eq!(s.get("w").unwrap().value.data(), &[0.3; 3]);
        assert_eq!(opt.steps(), 100);
    }
}
