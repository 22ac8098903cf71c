use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily, one per
/// parameter of the store it is first stepped with.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that requires a gradient, then clears all
    /// gradients in the store.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().map(|(_, p)| p).find(|p| p.requires_grad && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                p.grad = None;
                continue;
            }
            let g = p.grad.take().expect("checked above");
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(vec![value]));
        s.get_mut(id).grad = Some(vec![grad]);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_param(0.0, 1.0);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        adam.step(&mut s).unwrap();
        // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps)
        let w = s.iter().next().unwrap().1.value.item();
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!(s.iter().all(|(_, p)| p.grad.is_none()));
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut s = one_param(0.7, 0.0);
        Adam::new(AdamConfig::default()).step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item(), 0.7);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = one_param(0.0, 1.0);
        s.zero_grads();
        assert!(matches!(Adam::new(AdamConfig::default()).step(&mut s), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut s = one_param(0.3, 0.0);
            let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
            let mut out = Vec::new();
            for k in 0..20 {
                let w = s.iter().next().unwrap().1.value.item();
                let id = s.id("w").unwrap();
                s.get_mut(id).grad = Some(vec![2.0 * w - 0.1 * k as f64]);
                adam.step(&mut s).unwrap();
                out.push(s.value(id).item().to_bits());
            }
            out
        };
        assert_eq!(run(), run());
    }
}
