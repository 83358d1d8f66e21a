use alloc::vec::Vec;

use super::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over `total_steps`.
    Cosine { total_steps: usize },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps } => {
                if total_steps == 0 {
                    return base;
                }
                let t = (step.min(total_steps)) as f64 / total_steps as f64;
                0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
        }
    }
}

/// Adam with bias correction (PyTorch semantics, L2-style weight decay).
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |t: &crate::tensor::Tensor| alloc::vec![0.0f32; t.data().len()];
        Self {
            config,
            m: params.values().iter().map(zeros).collect(),
            v: params.values().iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        let step_size = (lr / bc1) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let inv_sqrt_bc2 = (1.0 / libm::sqrt(bc2)) as f32;
        let eps = c.eps as f32;
        let wd = c.weight_decay as f32;
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads.0[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] + wd * *w;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let denom = libm::sqrtf(v[j]) * inv_sqrt_bc2 + eps;
                *w -= step_size * m[j] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine { total_steps: 10 };
        assert_eq!(s.rate(1e-3, 0), 1e-3);
        assert!((s.rate(1e-3, 5) - 5e-4).abs() < 1e-12);
        assert!(s.rate(1e-3, 10).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.1, 99), 0.1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::from_vec([1, 1, 1, 2], alloc::vec![1.0, -1.0]).unwrap());
        let mut grads = ps.zero_grads();
        grads.0[0].data_mut().copy_from_slice(&[0.5, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&mut ps, &grads, 1e-3);
        let w = ps.values()[0].data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::from_vec([1, 1, 1, 1], alloc::vec![3.0]).unwrap());
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &ps);
        for _ in 0..500 {
            let mut g = ps.zero_grads();
            let w = ps.values()[0].data()[0];
            g.0[0].data_mut()[0] = 2.0 * (w - 1.0);
            adam.step(&mut ps, &g, 0.05);
        }
        assert!((ps.values()[0].data()[0] - 1.0).abs() < 1e-2);
    }
}
