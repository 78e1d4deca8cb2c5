//! Adam optimizer with exportable state for checkpoint/resume.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tensor};

pub struct Adam<E: Scalar> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    t: u64,
    m: HashMap<u64, Vec<E>>,
    v: HashMap<u64, Vec<E>>,
}

/// Serializable snapshot of optimizer state, aligned with a parameter list.
#[derive(Clone)]
pub struct AdamState<E> {
    pub t: u64,
    pub moments: Vec<(Vec<E>, Vec<E>)>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(lr: E, beta1: E, beta2: E) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: E::from_f64(1e-8),
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update to every parameter that received a gradient.
    pub fn step(&mut self, params: &[Tensor<E>], grads: &Gradients<E>) {
        self.t += 1;
        let one = E::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for p in params {
            let Some(g) = grads.grad(p) else { continue };
            let g = g.data();
            let m = self
                .m
                .entry(p.id())
                .or_insert_with(|| vec![E::zero(); p.len()]);
            let v = self
                .v
                .entry(p.id())
                .or_insert_with(|| vec![E::zero(); p.len()]);
            p.update_data(|data| {
                for i in 0..data.len() {
                    let gi = g[i];
                    m[i] = self.beta1 * m[i] + (one - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (one - self.beta2) * gi * gi;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    data[i] = data[i] - self.lr * mh / (vh.sqrt() + self.eps);
                }
            });
        }
    }

    /// Export state in the order of `params` (zeros for never-updated ones).
    pub fn state(&self, params: &[Tensor<E>]) -> AdamState<E> {
        let moments = params
            .iter()
            .map(|p| {
                let m = self.m.get(&p.id()).cloned().unwrap_or_else(|| vec![E::zero(); p.len()]);
                let v = self.v.get(&p.id()).cloned().unwrap_or_else(|| vec![E::zero(); p.len()]);
                (m, v)
            })
            .collect();
        AdamState { t: self.t, moments }
    }

    pub fn load_state(&mut self, params: &[Tensor<E>], state: AdamState<E>) {
        assert_eq!(params.len(), state.moments.len(), "optimizer state mismatch");
        self.t = state.t;
        self.m.clear();
        self.v.clear();
        for (p, (m, v)) in params.iter().zip(state.moments) {
            assert_eq!(p.len(), m.len(), "optimizer moment size mismatch");
            self.m.insert(p.id(), m);
            self.v.insert(p.id(), v);
        }
    }
}
