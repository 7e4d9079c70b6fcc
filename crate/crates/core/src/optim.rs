//! Adam.

use alloc::vec::Vec;

use crate::graph::Gradients;
use crate::math;
use crate::params::{ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || -> Vec<Vec<f64>> {
            store.iter().map(|(_, p)| alloc::vec![0.0; p.value.data().len()]).collect()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable parameter with a
    /// gradient. Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - math::powi(c.beta1, self.step);
        let bc2 = 1.0 - math::powi(c.beta2, self.step);
        for (id, g) in grads.params() {
            if store.get(id).kind != ParamKind::Trainable {
                continue;
            }
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in store.value_mut(id).data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= c.learning_rate * mh / (math::sqrt(vh) + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::ParamKind;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", ParamKind::Trainable, Tensor::from_vec(Shape::new(1, 1, 1, 2), alloc::vec![1.0, -1.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(id, store.value(id).clone());
        let grads = g
            .backward(&[(w, Tensor::from_vec(Shape::new(1, 1, 1, 2), alloc::vec![0.5, -2.0]).unwrap())])
            .unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store, &grads);
        let d = store.value(id).data();
        assert!((d[0] - (1.0 - 3e-4)).abs() < 1e-10);
        assert!((d[1] - (-1.0 + 3e-4)).abs() < 1e-10);
        assert_eq!(opt.steps(), 1);
    }
}
