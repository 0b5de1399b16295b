//! AdamW and the warmup plus cosine learning-rate schedule.

use crate::error::{bail, Result};
use crate::numerics::{ParamStore, Real, Tensor};

use super::config::OptimConfig;

/// Linear warmup from 0 to `base`, then cosine decay reaching 0 at the last
/// step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self { base, warmup_steps: warmup_steps.min(total_steps.saturating_sub(1)), total_steps }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let last = self.total_steps.saturating_sub(1);
        if step >= last {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        let span = (last - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.base * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only;
/// biases, norms, mask tokens and layer weights are exempt.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    decay: Vec<bool>,
    trainable: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: OptimConfig) -> Self {
        let zeros = || store.specs().iter().map(|s| Tensor::zeros(&s.shape)).collect::<Vec<_>>();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
            decay: store.specs().iter().map(|s| s.shape.len() >= 2).collect(),
            trainable: vec![true; store.len()],
        }
    }

    /// Excludes parameters whose names start with any of `prefixes`.
    pub fn freeze(&mut self, store: &ParamStore<T>, prefixes: &[&str]) {
        for (flag, spec) in self.trainable.iter_mut().zip(store.specs()) {
            if prefixes.iter().any(|p| spec.name.starts_with(p)) {
                *flag = false;
            }
        }
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            bail!(Argument, "optimizer holds {} slots for {} parameters and {} gradients", self.m.len(), store.len(), grads.len());
        }
        self.step += 1;
        let (b1, b2) = (T::c(self.cfg.beta1), T::c(self.cfg.beta2));
        let c1 = T::c(1.0 - self.cfg.beta1.powi(self.step as i32));
        let c2 = T::c(1.0 - self.cfg.beta2.powi(self.step as i32));
        let (lr, eps, wd) = (T::c(lr), T::c(self.cfg.eps), T::c(self.cfg.weight_decay));
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let g = grads[i].data();
            if g.len() != p.len() {
                bail!(Argument, "gradient {i} has {} elements, parameter has {}", g.len(), p.len());
            }
            let decay = if self.decay[i] { wd } else { T::zero() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (T::one() - b1) * gj;
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                let (mh, vh) = (*mj / c1, *vj / c2);
                *w = *w - lr * (mh / (vh.sqrt() + eps) + decay * *w);
            }
        }
        Ok(())
    }
}
