use serde::{Deserialize, Serialize};

use super::{Grads, ParamId, ParamStore, Real};

/// Decoupled weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(ps: &ParamStore<T>) -> Self {
        let zeros = |e: &super::params::ParamEntry<T>| vec![T::zero(); e.data.len()];
        Self {
            step: 0,
            m: ps.entries().iter().map(zeros).collect(),
            v: ps.entries().iter().map(zeros).collect(),
        }
    }
}

impl AdamW {
    /// One update at learning rate `lr`; parameters without a gradient are
    /// only decayed.
    pub fn step<T: Real>(&self, ps: &mut ParamStore<T>, grads: &Grads<T>, state: &mut AdamWState<T>, lr: f64) {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (i, entry) in ps.entries_mut().iter_mut().enumerate() {
            if entry.decay && self.weight_decay > 0.0 {
                let f = T::of(1.0 - lr * self.weight_decay);
                entry.data.iter_mut().for_each(|p| *p = *p * f);
            }
            let Some(g) = grads.get(ParamId(i)) else { continue };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for k in 0..g.len() {
                m[k] = b1 * m[k] + ob1 * g[k];
                v[k] = b2 * v[k] + ob2 * g[k] * g[k];
                entry.data[k] = entry.data[k] - step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
    }
}
