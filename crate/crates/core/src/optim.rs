//! AdamW with decoupled weight decay, and a linear warmup/decay schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every named parameter. Gradients are checked before any
    /// parameter changes, so a non-finite gradient leaves `params` untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            clip_norm,
        } = self.config;
        let norm = global_norm(grads);
        let clip = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            for (((x, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                let gi = gi * clip;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *x -= lr * (update + weight_decay * *x);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradient entries, summed in name order so the
/// result does not depend on the order of `grads`.
pub fn global_norm(grads: &[(String, Tensor)]) -> f64 {
    let mut parts: Vec<(&str, f64)> = grads
        .iter()
        .map(|(n, g)| (n.as_str(), g.data().iter().map(|x| x * x).sum::<f64>()))
        .collect();
    parts.sort_by(|a, b| a.0.cmp(b.0));
    parts.iter().map(|p| p.1).sum::<f64>().sqrt()
}

/// Linear warmup over the first `warmup` steps, then linear decay to zero
/// at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    /// Warmup takes `warmup_fraction` of `total`.
    pub fn new(peak: f64, total: usize, warmup_fraction: f64) -> Self {
        Self {
            peak,
            warmup: (warmup_fraction * total as f64).round() as usize,
            total,
        }
    }

    /// Learning rate for 0-based step `t`.
    pub fn lr(&self, t: usize) -> f64 {
        if t < self.warmup {
            self.peak * t as f64 / self.warmup as f64
        } else if t >= self.total {
            0.0
        } else {
            let span = (self.total - self.warmup) as f64;
            self.peak * (self.total - t) as f64 / span
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut p = ParamStore::default();
        p.insert("w", Tensor::vector(values.to_vec()));
        p
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = store(&[1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let (lr, wd) = (1e-3, 0.01);
        opt.step(&mut p, &[("w".into(), Tensor::zeros(&[3]))], lr).unwrap();
        let got = p.get("w").unwrap().data();
        for (g, x) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert_eq!(*g, x - lr * wd * x);
        }
    }

    #[test]
    fn converges_on_a_quadratic() {
        let target = [3.0, -1.5, 0.25, 2.0];
        let mut p = store(&[0.0; 4]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..2000 {
            let x = p.get("w").unwrap().data().to_vec();
            let g: Vec<f64> = x.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.step(&mut p, &[("w".into(), Tensor::vector(g))], 0.05).unwrap();
        }
        let x = p.get("w").unwrap().data();
        let loss: f64 = x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(loss < 1e-3, "{loss}");
    }

    #[test]
    fn non_finite_gradient_is_reported_without_update() {
        let mut p = store(&[1.0, 2.0]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt
            .step(&mut p, &[("w".into(), Tensor::vector(vec![f64::NAN, 0.0]))], 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(n) if n == "w"));
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first update ±lr (up to eps)
        let mut p = store(&[0.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut p, &[("w".into(), Tensor::vector(vec![0.3]))], 0.01)
            .unwrap();
        assert!((p.get("w").unwrap().data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        // clipping must match feeding the rescaled gradient to an unclipped optimizer
        let g = vec![30.0, -40.0];
        let mut a = store(&[0.0, 0.0]);
        let mut b = store(&[0.0, 0.0]);
        let mut clipped = AdamW::new(AdamWConfig::default());
        let mut manual = AdamW::new(AdamWConfig {
            clip_norm: None,
            ..AdamWConfig::default()
        });
        for _ in 0..3 {
            clipped
                .step(&mut a, &[("w".into(), Tensor::vector(g.clone()))], 0.1)
                .unwrap();
            manual
                .step(&mut b, &[("w".into(), Tensor::vector(vec![0.6, -0.8]))], 0.1)
                .unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(global_norm(&[("w".into(), Tensor::vector(g))]), 50.0);
    }

    #[test]
    fn update_ignores_gradient_order() {
        let mut params = ParamStore::default();
        let mut grads = Vec::new();
        for (i, name) in ["a", "b", "c"].into_iter().enumerate() {
            params.insert(name, Tensor::vector(vec![0.5 * i as f64, -1.0, 2.0]));
            grads.push((
                name.to_string(),
                Tensor::vector(vec![1.0 + i as f64, 3.0, -0.7 * i as f64]),
            ));
        }
        let run = |order: &[usize]| {
            let mut p = params.clone();
            let mut opt = AdamW::new(AdamWConfig::default());
            let g: Vec<(String, Tensor)> = order.iter().map(|&i| grads[i].clone()).collect();
            for _ in 0..3 {
                opt.step(&mut p, &g, 0.1).unwrap();
            }
            p
        };
        let forward = run(&[0, 1, 2]);
        let backward = run(&[2, 0, 1]);
        for name in ["a", "b", "c"] {
            let (x, y) = (forward.get(name).unwrap().data(), backward.get(name).unwrap().data());
            assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule::new(1e-3, 100, 0.1);
        assert_eq!(s.warmup, 10);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(5) - 5e-4).abs() < 1e-15);
        assert!((s.lr(10) - 1e-3).abs() < 1e-15);
        assert!(s.lr(50) < s.lr(20));
        assert!(s.lr(99) > 0.0);
        assert_eq!(s.lr(100), 0.0);
        for t in 0..100 {
            assert!(s.lr(t) <= 1e-3 + 1e-15);
        }
        let none = LinearSchedule::new(1.0, 10, 0.0);
        assert_eq!(none.lr(0), 1.0);
    }
}
