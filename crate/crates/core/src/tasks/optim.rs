//! Adam with per-group learning rates and an optional warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: default_lr(), beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config_err!("train.optimizer.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(config_err!("train.optimizer betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to zero at the last step.
    WarmupCosine { warmup: usize },
}

impl Schedule {
    /// Multiplier of the base rate at `step` (0-based) of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::WarmupCosine { warmup } => {
                if step < warmup {
                    (step + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    let prog = (step - warmup) as f64 / span;
                    0.5 * (1.0 + (std::f64::consts::PI * prog.min(1.0)).cos())
                }
            }
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    /// Multiplier for mask parameters.
    mask_lr_factor: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, mask_lr_factor: f64) -> Self {
        Self { cfg, mask_lr_factor, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// One update with learning-rate multiplier `scale`. `grads[i]` belongs to `ids[i]`.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &[Tensor], scale: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (&id, g) in ids.iter().zip(grads) {
            let lr = match store.group(id) {
                Group::Frozen => continue,
                Group::Main => self.cfg.lr * scale,
                Group::Mask => self.cfg.lr * scale * self.mask_lr_factor,
            };
            let i = id.index();
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
                self.v.resize(i + 1, None);
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pj, mj), vj), &gj) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + self.cfg.eps);
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
        let a = store.add("a", Tensor::vector(vec![1.0, -2.0]), Group::Main);
        let b = store.add("b", Tensor::scalar(0.5), Group::Mask);
        let c = store.add("c", Tensor::scalar(0.5), Group::Frozen);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, 0.01);
        let g = [Tensor::vector(vec![3.0, -0.2]), Tensor::scalar(1.0), Tensor::scalar(1.0)];
        opt.step(&mut store, &[a, b, c], &g, 1.0);
        assert!((store.get(a).data()[0] - 0.9).abs() < 1e-7);
        assert!((store.get(a).data()[1] + 1.9).abs() < 1e-6);
        assert!((store.get(b).item() - 0.499).abs() < 1e-8);
        assert_eq!(store.get(c).item(), 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![3.0, -4.0]), Group::Main);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, 1.0);
        for _ in 0..2000 {
            let g = store.get(a).scale(2.0);
            opt.step(&mut store, &[a], &[g], 1.0);
        }
        assert!(store.get(a).max_abs() < 1e-3);
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule::WarmupCosine { warmup: 10 };
        assert!((s.factor(0, 100) - 0.1).abs() < 1e-12);
        assert_eq!(s.factor(9, 100), 1.0);
        assert_eq!(s.factor(10, 100), 1.0);
        assert!(s.factor(99, 100) < 1e-3);
        assert_eq!(Schedule::Constant.factor(50, 100), 1.0);
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
