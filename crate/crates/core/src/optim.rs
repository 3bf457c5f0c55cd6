//! Adam with coupled L2 weight decay, applied lazily: a parameter slot is
//! only touched on steps where it received a gradient.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Identifies one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Key(usize),
    Prompt(usize),
    Tunable(usize),
}

#[derive(Debug, Clone)]
struct Moments<T> {
    step: i32,
    first: Vec<T>,
    second: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    state: HashMap<Slot, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: HashMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// One update of `param` given its gradient.
    pub fn update(&mut self, slot: Slot, param: &mut [T], grad: &[T]) {
        let c = self.config;
        let m = self.state.entry(slot).or_insert_with(|| Moments {
            step: 0,
            first: vec![T::zero(); param.len()],
            second: vec![T::zero(); param.len()],
        });
        m.step += 1;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::one() - b1.powi(m.step);
        let bias2 = T::one() - b2.powi(m.step);
        let (lr, wd, eps) = (T::lit(c.lr), T::lit(c.weight_decay), T::lit(c.eps));
        for (((p, g), m1), m2) in param.iter_mut().zip(grad).zip(m.first.iter_mut()).zip(m.second.iter_mut()) {
            let g = *g + wd * *p;
            *m1 = b1 * *m1 + (T::one() - b1) * g;
            *m2 = b2 * *m2 + (T::one() - b2) * g * g;
            let m_hat = *m1 / bias1;
            let v_hat = *m2 / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = vec![1.0, -1.0];
        adam.update(Slot::Key(0), &mut p, &[0.3, -5.0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::<f64>::new(AdamConfig { lr: 0.05, ..Default::default() });
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0)];
            adam.update(Slot::Tunable(0), &mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
