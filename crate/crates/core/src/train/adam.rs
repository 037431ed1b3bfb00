use alloc::vec;
use alloc::vec::Vec;

use crate::graph::Gradients;
use crate::nn::{Bound, ParamStore};
use crate::scalar::Real;

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { lr, beta1, beta2, eps, steps: 0, first: zeros(), second: zeros() }
    }

    /// Apply the gradients of `store`'s parameters bound as `bound`.
    /// Parameters the loss does not reach are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (a1, a2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(self.lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for (i, param) in store.params.iter_mut().enumerate() {
            let Some(g) = grads.get(bound.get(i)) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, g), m), v) in param.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + a1 * *g;
                *v = b2 * *v + a2 * *g * *g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}
