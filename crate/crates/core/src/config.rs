//! Run configuration: one JSON document covering data generation, model
//! dimensions, both training stages and the evaluation protocol, with full
//! validation and explicit defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::ProtocolConfig;
use crate::mdgen::{ChainSpec, SimConfig, TempSets};
use crate::meta::MetaStageConfig;
use crate::model::ModelDims;
use crate::stage1::Stage1Config;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub d_h: usize,
    pub d_s: usize,
    pub d_p: usize,
    pub hidden: usize,
    pub prompt_hidden: usize,
    pub predictor_layers: usize,
    pub prompt_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 8,
            d_s: 32,
            d_p: 16,
            hidden: 64,
            prompt_hidden: 32,
            predictor_layers: 4,
            prompt_init_gain: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub chain: ChainSpec,
    pub sim: SimConfig,
    pub temps: TempSets,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub meta: MetaStageConfig,
    pub protocol: ProtocolConfig,
}

fn fail(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            n_bead_types: self.chain.n_beads,
            d_h: self.model.d_h,
            d_s: self.model.d_s,
            d_p: self.model.d_p,
            hidden: self.model.hidden,
            prompt_hidden: self.model.prompt_hidden,
            predictor_layers: self.model.predictor_layers,
            prompt_init_gain: self.model.prompt_init_gain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chain.n_beads < 2 {
            return Err(fail("chain.n_beads", "need at least 2 beads"));
        }
        for (name, value) in [
            ("chain.bond_k", self.chain.bond_k),
            ("chain.bond_r0", self.chain.bond_r0),
            ("chain.angle_k", self.chain.angle_k),
            ("chain.mass", self.chain.mass),
        ] {
            if !(value > 0.0) {
                return Err(fail(name, format!("must be positive, got {value}")));
            }
        }
        if self.chain.repulsion < 0.0 {
            return Err(fail("chain.repulsion", "must be non-negative"));
        }
        if !(self.sim.dt > 0.0) {
            return Err(fail("sim.dt", "must be positive"));
        }
        if !(self.sim.friction > 0.0) {
            return Err(fail("sim.friction", "must be positive"));
        }
        if self.sim.stride == 0 {
            return Err(fail("sim.stride", "must be at least 1"));
        }
        if self.sim.train_frames < 2 {
            return Err(fail("sim.train_frames", "need at least 2 frames"));
        }
        if self.sim.test_frames < 2 {
            return Err(fail("sim.test_frames", "need at least 2 frames"));
        }
        for (group, temps) in [
            ("temps.train", &self.temps.train),
            ("temps.unseen", &self.temps.unseen),
            ("temps.ood", &self.temps.ood),
        ] {
            for (i, &t) in temps.iter().enumerate() {
                if !(t > 0.0) {
                    return Err(fail(
                        &format!("{group}[{i}]"),
                        format!("temperature must be positive, got {t}"),
                    ));
                }
            }
        }
        if self.temps.train.is_empty() {
            return Err(fail("temps.train", "at least one training temperature"));
        }
        {
            let mut all: Vec<f64> = self
                .temps
                .train
                .iter()
                .chain(&self.temps.unseen)
                .chain(&self.temps.ood)
                .copied()
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in all.windows(2) {
                if w[0] == w[1] {
                    return Err(fail(
                        "temps",
                        format!("temperature {} appears in two sets", w[0]),
                    ));
                }
            }
        }
        for (name, value) in [
            ("model.d_h", self.model.d_h),
            ("model.d_s", self.model.d_s),
            ("model.d_p", self.model.d_p),
            ("model.hidden", self.model.hidden),
            ("model.prompt_hidden", self.model.prompt_hidden),
        ] {
            if value == 0 {
                return Err(fail(name, "must be at least 1"));
            }
        }
        if !(self.model.prompt_init_gain > 0.0) {
            return Err(fail("model.prompt_init_gain", "must be positive"));
        }
        if self.stage1.epochs == 0 {
            return Err(fail("stage1.epochs", "must be at least 1"));
        }
        if self.stage1.e_period == 0 {
            return Err(fail("stage1.e_period", "must be at least 1"));
        }
        if self.stage1.n_period == 0 || self.stage1.n_min == 0 {
            return Err(fail("stage1.n_period", "periods must be at least 1"));
        }
        if self.stage1.n_min > self.stage1.n_period {
            return Err(fail("stage1.n_min", "must not exceed stage1.n_period"));
        }
        if !(self.stage1.lr > 0.0) {
            return Err(fail("stage1.lr", "must be positive"));
        }
        if self.stage1.weight_decay < 0.0 {
            return Err(fail("stage1.weight_decay", "must be non-negative"));
        }
        if self.stage1.log_every == 0 {
            return Err(fail("stage1.log_every", "must be at least 1"));
        }
        for (name, value) in [
            ("meta.alpha", self.meta.alpha),
            ("meta.beta", self.meta.beta),
            ("meta.gamma", self.meta.gamma),
        ] {
            if value < 0.0 {
                return Err(fail(name, "must be non-negative"));
            }
        }
        if self.meta.epochs == 0 {
            return Err(fail("meta.epochs", "must be at least 1"));
        }
        if !(self.meta.support_fraction > 0.0 && self.meta.support_fraction < 1.0) {
            return Err(fail("meta.support_fraction", "must lie in (0, 1)"));
        }
        if self.protocol.trials == 0 {
            return Err(fail("protocol.trials", "must be at least 1"));
        }
        if !(self.protocol.support_fraction > 0.0 && self.protocol.support_fraction < 1.0) {
            return Err(fail("protocol.support_fraction", "must lie in (0, 1)"));
        }
        if !(self.protocol.finetune_lr > 0.0) {
            return Err(fail("protocol.finetune_lr", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn default_hyperparameters_are_pinned() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stage1.e_pre, 50);
        assert_eq!(cfg.stage1.e_period, 10);
        assert_eq!(cfg.stage1.n_period, 256);
        assert_eq!(cfg.stage1.n_min, 16);
        assert_eq!(cfg.stage1.lr, 1e-4);
        assert_eq!(cfg.stage1.weight_decay, 1e-5);
        assert_eq!(cfg.meta.alpha, 1e-3);
        assert_eq!(cfg.meta.gamma, 1e-3);
        assert_eq!(cfg.meta.beta, 0.01);
        assert_eq!(cfg.protocol.finetune_epochs, 3);
        assert_eq!(cfg.protocol.trials, 5);
        assert_eq!(cfg.protocol.support_fraction, 0.5);
        assert_eq!(cfg.temps.train, vec![0.8, 1.0, 1.2]);
        assert_eq!(cfg.temps.unseen, vec![0.85, 0.90, 0.95, 1.05, 1.10, 1.15]);
        assert_eq!(cfg.temps.ood, vec![1.5]);
        assert_eq!(cfg.sim.train_frames, 2000);
        assert_eq!(cfg.sim.test_frames, 600);
    }

    #[test]
    fn negative_temperature_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.temps.unseen[2] = -0.5;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "temps.unseen[2]"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let json = cfg.to_pretty_json();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 5, "stage1": {"epochs": 7}}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.stage1.epochs, 7);
        assert_eq!(cfg.stage1.e_pre, 50);
        assert_eq!(cfg.model.hidden, 64);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let result: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"no_such_field": 1}"#);
        assert!(result.is_err());
    }
}
