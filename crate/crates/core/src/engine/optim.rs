//! Optimizers used by the training stages: Adam for the meta stage, the
//! sign-momentum rule for pre-training, and a plain gradient step for inner
//! adaptation and prompt fine-tuning.

use std::collections::BTreeMap;

use crate::engine::graph::GradMap;
use crate::engine::params::{ParamStore, PartitionSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily with the shape of the first gradient seen.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in `filter`. Errors if such a
    /// parameter has no gradient in `grads`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradMap,
        filter: PartitionSet,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let names = store.names_in(filter);
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            let param = store.get_mut(&name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g[i] + c.weight_decay * param.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LionConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for LionConfig {
    fn default() -> Self {
        LionConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-5,
        }
    }
}

/// Sign-momentum optimizer: the update direction is
/// sign(beta1 * m + (1 - beta1) * g), weight decay is decoupled, and the
/// momentum buffer is refreshed with beta2 afterwards.
#[derive(Debug, Clone)]
pub struct Lion {
    pub config: LionConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
}

impl Lion {
    pub fn new(config: LionConfig) -> Self {
        Lion {
            config,
            step: 0,
            m: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradMap,
        filter: PartitionSet,
    ) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let names = store.names_in(filter);
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            let param = store.get_mut(&name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let dir = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                let sign = if dir > 0.0 {
                    1.0
                } else if dir < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                param.data[i] -= c.lr * (sign + c.weight_decay * param.data[i]);
                m[i] = c.beta2 * m[i] + (1.0 - c.beta2) * g[i];
            }
        }
        Ok(())
    }
}

/// Plain gradient descent over one partition set: p <- p - lr * g.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &GradMap,
    lr: f64,
    filter: PartitionSet,
) -> Result<()> {
    let names = store.names_in(filter);
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        let param = store.get_mut(&name)?;
        for (p, gv) in param.data.iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::params::{Param, Partition};

    fn one_param_store(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Param::new(vec![1], vec![value], Partition::Backbone));
        s
    }

    fn grad_of(value: f64) -> GradMap {
        let mut g = GradMap::new();
        g.insert("w".to_string(), vec![value]);
        g
    }

    #[test]
    fn adam_zero_grad_zero_moments_is_noop() {
        let mut store = one_param_store(1.5);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &grad_of(0.0), PartitionSet::BACKBONE)
            .unwrap();
        assert_eq!(store.get("w").unwrap().data[0], 1.5);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        // Bias-corrected m_hat / sqrt(v_hat) = 1 at step one for any g != 0,
        // so the update is lr / (1 + eps-ish) ~ lr.
        let mut store = one_param_store(0.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.001,
            ..Default::default()
        });
        adam.step(&mut store, &grad_of(1.0), PartitionSet::BACKBONE)
            .unwrap();
        let w = store.get("w").unwrap().data[0];
        assert!((w + 0.001).abs() < 1e-8, "w = {w}");
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut store = one_param_store(0.3);
            let mut adam = Adam::new(AdamConfig::default());
            for k in 0..10 {
                adam.step(&mut store, &grad_of(0.1 * k as f64), PartitionSet::BACKBONE)
                    .unwrap();
            }
            store.get("w").unwrap().data[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_missing_grad_errors() {
        let mut store = one_param_store(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut store, &GradMap::new(), PartitionSet::BACKBONE);
        assert!(matches!(err, Err(Error::MissingGrad(_))));
    }

    #[test]
    fn lion_positive_gradient_moves_by_lr() {
        let mut store = one_param_store(1.0);
        let mut lion = Lion::new(LionConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        });
        lion.step(&mut store, &grad_of(0.37), PartitionSet::BACKBONE)
            .unwrap();
        assert_eq!(store.get("w").unwrap().data[0], 1.0 - 0.01);
    }

    #[test]
    fn lion_zero_everything_without_decay_is_noop() {
        let mut store = one_param_store(2.0);
        let mut lion = Lion::new(LionConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        lion.step(&mut store, &grad_of(0.0), PartitionSet::BACKBONE)
            .unwrap();
        assert_eq!(store.get("w").unwrap().data[0], 2.0);
    }

    #[test]
    fn lion_decay_only_shrinks_param() {
        let mut store = one_param_store(2.0);
        let cfg = LionConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            ..Default::default()
        };
        let mut lion = Lion::new(cfg.clone());
        lion.step(&mut store, &grad_of(0.0), PartitionSet::BACKBONE)
            .unwrap();
        let expected = 2.0 - cfg.lr * cfg.weight_decay * 2.0;
        assert_eq!(store.get("w").unwrap().data[0], expected);
    }

    #[test]
    fn lion_sign_of_mixed_momentum() {
        // m = -1, g = +0.5, beta1 = 0.9 -> direction sign(-0.85) = -1,
        // so the parameter increases by exactly lr.
        let mut store = one_param_store(0.0);
        let mut lion = Lion::new(LionConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        });
        // Build momentum -1 by feeding g = -100 with beta2 = 0.99: m = -1.
        lion.step(&mut store, &grad_of(-100.0), PartitionSet::BACKBONE)
            .unwrap();
        let before = store.get("w").unwrap().data[0];
        lion.step(&mut store, &grad_of(0.5), PartitionSet::BACKBONE)
            .unwrap();
        let after = store.get("w").unwrap().data[0];
        assert!((after - before - 0.01).abs() < 1e-12);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut store = one_param_store(1.0);
        sgd_step(&mut store, &grad_of(2.0), 0.1, PartitionSet::BACKBONE).unwrap();
        assert!((store.get("w").unwrap().data[0] - 0.8).abs() < 1e-15);
    }
}
