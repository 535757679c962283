//! AdamW with decoupled weight decay, global-norm clipping and a cosine schedule.

use super::params::{ParamGroup, ParamStore};
use super::tensor::Tensor;

/// Cosine annealing from `base_lr` at step 0 to `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: usize) -> Self {
        CosineSchedule {
            base_lr,
            min_lr,
            total_steps,
        }
    }

    pub fn constant(lr: f64) -> Self {
        CosineSchedule {
            base_lr: lr,
            min_lr: lr,
            total_steps: 1,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.min_lr;
        }
        let t = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let v = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        OptimizerState {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Clips the global gradient norm to `clip_norm`, then applies one AdamW
    /// update. `lr_for` returns the learning rate of a group, or `None` for a
    /// group that stays frozen this step. Weight decay applies to matrices only.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        lr_for: impl Fn(ParamGroup) -> Option<f64>,
    ) -> StepStats {
        let grad_norm = store.grad_norm();
        let clip = self.config.clip_norm;
        let factor = if clip > 0.0 && grad_norm > clip {
            clip / (grad_norm + 1e-12)
        } else {
            1.0
        };
        if factor != 1.0 {
            for p in store.iter_mut() {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .for_each(|g| *g = (*g as f64 * factor) as f32);
            }
        }
        let clipped_norm = store.grad_norm();
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, p) in store.iter_mut().enumerate() {
            let Some(lr) = lr_for(p.group) else { continue };
            if p.group == ParamGroup::Fixed {
                continue;
            }
            let decay = if p.value.shape().len() >= 2 {
                c.weight_decay
            } else {
                0.0
            };
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let grad = p.grad.data();
            let val = p.value.data_mut();
            for i in 0..val.len() {
                let gi = grad[i] as f64;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let x = val[i] as f64;
                val[i] = (x - lr * (mhat / (vhat.sqrt() + c.eps) + decay * x)) as f32;
            }
        }
        StepStats {
            grad_norm,
            clipped_norm,
        }
    }
}
