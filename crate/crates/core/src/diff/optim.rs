use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every non-frozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        for (id, g) in grads.iter() {
            if store.get(id).frozen {
                continue;
            }
            let p = store.value_mut(id).data_mut();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - libm::pow(self.beta1, st.t as f64);
            let bc2 = 1.0 - libm::pow(self.beta2, st.t as f64);
            let decay = 1.0 - self.lr * self.weight_decay;
            for j in 0..p.len() {
                let gj = g.get(j).copied().unwrap_or(0.0);
                st.m[j] = self.beta1 * st.m[j] + (1.0 - self.beta1) * gj;
                st.v[j] = self.beta2 * st.v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = st.m[j] / bc1;
                let vhat = st.v[j] / bc2;
                p[j] = p[j] * decay - self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve by `threshold` for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: u32,
    pub threshold: f64,
    best: f64,
    bad_epochs: u32,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 2,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

impl PlateauSchedule {
    /// Records an epoch's loss and returns the (possibly reduced) learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Tape, Tensor};

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::row_vector(vec![3.0, -2.0]))
            .unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap();
            opt.step(&mut store, &g);
        }
        assert!(store.value(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0])).unwrap();
        store.set_frozen(id, true);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        assert!(!tape.requires_grad(w));
        let mut opt = AdamW::new(0.1, 0.1);
        let g = Gradients::default();
        opt.step(&mut store, &g);
        assert_eq!(store.value(id).data(), &[1.0]);
    }

    #[test]
    fn plateau_halves_after_two_flat_epochs() {
        let mut s = PlateauSchedule::default();
        let mut lr = 1e-3;
        lr = s.observe(1.0, lr);
        lr = s.observe(0.5, lr);
        assert_eq!(lr, 1e-3);
        lr = s.observe(0.50001, lr);
        assert_eq!(lr, 1e-3);
        lr = s.observe(0.5, lr);
        assert_eq!(lr, 5e-4);
    }
}
