use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// AdamW (decoupled weight decay) with a cosine-annealed learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub base_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub step: u64,
    #[serde(skip)]
    m: Vec<Matrix>,
    #[serde(skip)]
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, base_lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        let zeros = |s: &ParamStore| s.entries().iter().map(|e| Matrix::zeros(e.value.rows, e.value.cols)).collect();
        Self {
            base_lr,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            total_steps: total_steps.max(1),
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Cosine annealing from `base_lr` at step 0 to `min_lr` at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// First and second moment estimates, one pair per parameter in store order.
    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<Matrix>, v: Vec<Matrix>) -> Result<()> {
        let same = |a: &[Matrix], b: &[Matrix]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Shape("optimizer moments do not match the parameter layout".into()));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// One update. Frozen parameters and parameters without gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.entry(id).frozen {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
    }
}
