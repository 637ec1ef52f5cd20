//! AdamW with per-parameter learning rates and a linear warmup schedule.

use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};
use ndarray::ArrayD;

/// Linear warmup from `1/warmup` to 1, constant afterwards.
pub fn warmup_factor(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        1.0
    } else {
        (step + 1) as f64 / warmup_steps as f64
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    /// Base learning rate per parameter; `None` leaves it untouched.
    lrs: Vec<Option<f64>>,
    /// Decoupled decay only applies to matrices and kernels.
    decay: Vec<bool>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    /// `lr_of` maps a parameter name to its base learning rate, or `None`
    /// to exclude it from optimisation.
    pub fn new(store: &ParamStore, weight_decay: f64, lr_of: impl Fn(&str) -> Option<f64>) -> Self {
        let mut lrs = Vec::with_capacity(store.len());
        let mut decay = Vec::with_capacity(store.len());
        let mut m = Vec::with_capacity(store.len());
        for (_, name, value) in store.iter() {
            lrs.push(lr_of(name));
            decay.push(value.ndim() >= 2);
            m.push(ArrayD::zeros(value.raw_dim()));
        }
        let v = m.clone();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            lrs,
            decay,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn lr(&self, id: ParamId) -> Option<f64> {
        self.lrs[id.index()]
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr_scale: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(base) = self.lrs[i] else { continue };
            let lr = base * lr_scale;
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let p = store.get_mut(id);
            let g = grads.get(id);
            ndarray::Zip::from(p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *p *= 1.0 - lr * wd;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Moment buffers as `(name, first, second)` for checkpointing.
    pub fn state<'a>(
        &'a self,
        store: &'a ParamStore,
    ) -> impl Iterator<Item = (&'a str, &'a ArrayD<f64>, &'a ArrayD<f64>)> + 'a {
        store
            .iter()
            .map(move |(id, name, _)| (name, &self.m[id.index()], &self.v[id.index()]))
    }

    pub fn restore(
        &mut self,
        steps: u64,
        moments: impl Iterator<Item = (usize, ArrayD<f64>, ArrayD<f64>)>,
    ) -> Result<()> {
        for (i, m, v) in moments {
            if i >= self.m.len() || m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(Error::Param(format!("optimizer state {i} does not match")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        self.steps = steps;
        Ok(())
    }
}
