//! Adam optimizer over trainable parameters.

use std::collections::HashMap;

use crate::graph::Grads;
use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<ParamId, Tensor>,
    v: HashMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every gradient entry. Only trainable parameters may
    /// appear; each update is independent, so iteration order is immaterial.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut ids: Vec<ParamId> = grads.iter().map(|(id, _)| id).collect();
        ids.sort();
        for id in ids {
            assert_eq!(
                store.group(id),
                ParamGroup::Trainable,
                "gradient for frozen parameter `{}`",
                store.name(id)
            );
            let g = grads.get(id).unwrap();
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
