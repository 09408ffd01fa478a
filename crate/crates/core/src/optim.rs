//! AdamW with decoupled weight decay, cosine learning-rate decay and global-norm clipping.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::math;
use crate::model::{Gradients, Param};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Param], config: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.data.len()]).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Decay applies to matrices only.
    pub fn step(&mut self, params: &mut [Param], grads: &Gradients, lr: f64) -> Result<()> {
        if params.len() != grads.data.len() || params.len() != self.m.len() {
            return Err(config_err!("optimizer state does not match the parameter list"));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - math::powf(c.beta1, self.step as f64);
        let bc2 = 1.0 - math::powf(c.beta2, self.step as f64);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.data).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decays() { lr * c.weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / (math::sqrt(v[i] / bc2) + c.eps);
                p.data[i] -= decay * p.data[i] + lr * update;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to 0 over `total` steps after a linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + math::cos(core::f64::consts::PI * progress))
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = grads.norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BrainTransformer, ModelConfig};

    #[test]
    fn zero_lr_leaves_weights() {
        let mut m = BrainTransformer::new(ModelConfig::tiny(4, 2), 0).unwrap();
        let before = m.params().to_vec();
        let mut g = m.zero_grads();
        g.data.iter_mut().flatten().for_each(|x| *x = 0.3);
        let mut opt = AdamW::new(m.params(), AdamWConfig::default());
        opt.step(m.params_mut(), &g, 0.0).unwrap();
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = BrainTransformer::new(ModelConfig::tiny(4, 2), 0).unwrap();
        let before = m.params().to_vec();
        let mut g = m.zero_grads();
        g.data.iter_mut().flatten().for_each(|x| *x = -2.0);
        let mut opt = AdamW::new(m.params(), AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(m.params_mut(), &g, 0.1).unwrap();
        for (a, b) in m.params().iter().zip(&before) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y - 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100, 0), 1.0);
        assert!((cosine_lr(1.0, 50, 100, 0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100, 0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 1, 100, 4) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let m = BrainTransformer::new(ModelConfig::tiny(4, 2), 0).unwrap();
        let mut g = m.zero_grads();
        g.data[0][0] = 3.0;
        g.data[1][0] = 4.0;
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}
