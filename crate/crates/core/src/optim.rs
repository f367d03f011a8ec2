//! Adam with bias correction.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            if !store.get(id).trainable {
                continue;
            }
            let grad = store.get(id).grad.clone();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let value = store.value_mut(id).data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                value[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        store.get_mut(id).grad = Tensor::vector(vec![3.0, -0.01, 0.0]);
        let mut opt = Adam::new(&store, 0.1);
        opt.step(&mut store);
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-5);
        assert_eq!(v[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::vector(vec![4.0, -3.0])).unwrap();
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let g = store.value(id).map(|x| 2.0 * x);
            store.get_mut(id).grad = g;
            opt.step(&mut store);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 1e-3));
    }
}
