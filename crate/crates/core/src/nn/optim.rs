use std::collections::BTreeMap;

use crate::tensor::Tensor;

use super::{ParamKey, ParamStore};

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamKey, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for frozen groups are a logic error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamKey, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (key, g) in grads {
            assert!(!store.is_frozen(&key.group), "optimizer received gradient for frozen {key}");
            let param = store.get_mut(key).unwrap_or_else(|| panic!("unknown parameter {key}"));
            let (m, v) = self
                .moments
                .entry(key.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let p = param.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Scope;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let k = Scope::new("p").key("x");
        store.insert(&k, Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = store.get(&k).unwrap().clone();
            let g = x.scale(2.0);
            opt.step(&mut store, &BTreeMap::from([(k.clone(), g)]));
        }
        assert!(store.get(&k).unwrap().abs_max() < 1e-2);
    }

    #[test]
    #[should_panic(expected = "frozen")]
    fn refuses_frozen_groups() {
        let mut store = ParamStore::new();
        let k = Scope::new("p").key("x");
        store.insert(&k, Tensor::zeros(&[1]));
        store.freeze_all();
        Adam::new(0.1).step(&mut store, &BTreeMap::from([(k, Tensor::ones(&[1]))]));
    }
}
