//! Adam optimizer over parameter stores.
//!
//! One instance owns the first/second-moment state for every parameter it has
//! ever updated, keyed the same way gradients are. Passing several stores to
//! one `step` treats them as a single parameter group sharing the step count.

use std::collections::HashMap;

use super::graph::Gradients;
use super::params::{ParamKey, ParameterStore};
use super::Tensor;

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    state: HashMap<ParamKey, (Tensor, Tensor)>,
}

impl Adam {
    /// Constant learning rate, betas (0.9, 0.999), epsilon 1e-8, no decay.
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Applies one update to every learnable entry that received a gradient.
    /// Entries without gradients and non-learnable buffers are untouched.
    pub fn step(&mut self, stores: &mut [&mut ParameterStore], grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for store in stores.iter_mut() {
            let sid = store.id();
            for idx in 0..store.len() {
                let key = ParamKey {
                    store: sid,
                    index: idx,
                };
                let Some(g) = grads.param_by_key(key) else {
                    continue;
                };
                let (_, entry) = store.entry_at_mut(idx);
                if !entry.learnable {
                    continue;
                }
                let (m, v) = self
                    .state
                    .entry(key)
                    .or_insert_with(|| (Tensor::zeros(g.dim()), Tensor::zeros(g.dim())));
                ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                });
                ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                });
                ndarray::Zip::from(&mut entry.value)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|p, &m, &v| {
                        *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                    });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use ndarray::Array3;

    #[test]
    fn adam_drives_a_small_loss_down() {
        // Treat a [1,2,1,1] logit pair as the only parameter and minimize
        // cross-entropy toward class 1.
        let mut store = ParameterStore::new("test");
        store.insert("logits", Tensor::from_elem((1, 2, 1, 1), 0.0), true);
        let labels = Array3::from_elem((1, 1, 1), 1u8);
        let mut opt = Adam::new(0.1);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let mut g = Graph::new(true);
            let logits = g.param(&store, "logits");
            let (loss, _) = g.mce(logits, &labels, 0).unwrap();
            last = g.scalar_value(loss);
            let grads = g.backward(loss);
            opt.step(&mut [&mut store], &grads);
        }
        assert!(last < 1e-2, "loss stayed at {last}");
    }

    #[test]
    fn stores_without_gradients_are_untouched() {
        let mut store_a = ParameterStore::new("a");
        store_a.insert("w", Tensor::from_elem((1, 1, 1, 1), 1.0), true);
        let mut store_b = ParameterStore::new("b");
        store_b.insert("w", Tensor::from_elem((1, 1, 1, 1), 1.0), true);
        let labels = Array3::from_elem((1, 1, 1), 1u8);
        // Build a loss touching only store_a, then step both stores.
        let mut g = Graph::new(true);
        let one = g.param(&store_a, "w");
        let pad = g.constant(Tensor::zeros((1, 1, 1, 1)));
        let logits = g.concat_channels(&[one, pad]);
        let (loss, _) = g.mce(logits, &labels, 0).unwrap();
        let grads = g.backward(loss);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut store_a, &mut store_b], &grads);
        assert_ne!(store_a.get("w")[[0, 0, 0, 0]], 1.0);
        assert_eq!(store_b.get("w")[[0, 0, 0, 0]], 1.0);
    }
}
