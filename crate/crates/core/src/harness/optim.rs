//! Adam with global gradient-norm clipping.

use std::collections::BTreeMap;

use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients whose global L2 norm exceeds this are rescaled to it.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `store`, scaled by
    /// `grad_scale` first. Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) -> f64 {
        let norm = store
            .iter()
            .flat_map(|(_, p)| p.grad.data())
            .map(|g| (g * grad_scale) * (g * grad_scale))
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.cfg.clip { self.cfg.clip / norm } else { 1.0 };
        let scale = grad_scale * clip;

        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let grads = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i] * scale;
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0]));
        store.get_mut("w").unwrap();
        for (_, p) in store.iter_mut() {
            p.grad = Tensor::vector(vec![0.5, -3.0]);
        }
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store, 1.0);
        let w = store.get("w").unwrap().data();
        // with bias correction the first update is lr·sign(g) up to eps
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.0, 0.0]));
        for (_, p) in store.iter_mut() {
            p.grad = Tensor::vector(vec![30.0, 40.0]);
        }
        let mut opt = Adam::new(AdamConfig {
            clip: 5.0,
            ..AdamConfig::default()
        });
        let norm = opt.step(&mut store, 1.0);
        assert_eq!(norm, 50.0);
        let (m, _) = &opt.moments["w"];
        // m = (1 − β1)·g_clipped = 0.1·(3, 4)
        assert!((m.data()[0] - 0.3).abs() < 1e-12);
        assert!((m.data()[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![3.0]));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            for (_, p) in store.iter_mut() {
                let w = p.value.data()[0];
                p.grad = Tensor::vector(vec![2.0 * (w - 1.0)]);
            }
            opt.step(&mut store, 1.0);
        }
        assert!((store.get("w").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }
}
