//! Curriculum pre-training with mixed samples.
//!
//! The run starts with plain supervised epochs. Once mixing begins, every
//! epoch (1) refills the structure pool from the current encoder, (2) updates
//! the mixing networks for one pass over the data via the mixer-side loss,
//! then (3) updates the backbone per sample, inserting one mixed backbone
//! update after every `n_period` real samples. `n_period` halves at epoch
//! boundaries every `e_period` mixing epochs until it reaches `n_min`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::engine::checkpoint::save_checkpoint;
use crate::engine::optim::{Lion, LionConfig};
use crate::engine::params::{ParamStore, PartitionSet};
use crate::error::{Error, Result};
use crate::mdgen::Dataset;
use crate::model::{init_model_params, Conformation, MixPass, PoolEntry, SurrogateModel};
use crate::par::par_map;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage1Config {
    /// Total epochs (plain pre-phase plus mixing phase).
    pub epochs: usize,
    pub e_pre: usize,
    pub e_period: usize,
    pub n_period: usize,
    pub n_min: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Optional cap on the nearest-structure scan; unset scans exhaustively.
    pub scan_cap: Option<usize>,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_interval: usize,
    /// Emit a log line every this many steps.
    pub log_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 100,
            e_pre: 50,
            e_period: 10,
            n_period: 256,
            n_min: 16,
            lr: 1e-4,
            weight_decay: 1e-5,
            scan_cap: None,
            checkpoint_interval: 0,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: usize,
    pub mixing: bool,
    pub n_period: usize,
}

/// Per-epoch curriculum: no mixing through `e_pre`, then mixing with
/// `n_period` halved after each full `e_period` of mixing epochs, floored at
/// `n_min`.
pub fn curriculum_schedule(total_epochs: usize, cfg: &Stage1Config) -> Vec<EpochPlan> {
    (1..=total_epochs)
        .map(|epoch| {
            let mixing = epoch > cfg.e_pre;
            let n_period = if mixing {
                let halvings = (epoch - cfg.e_pre - 1) / cfg.e_period.max(1);
                let mut n = cfg.n_period;
                for _ in 0..halvings {
                    if n > cfg.n_min {
                        n /= 2;
                    }
                }
                n.max(cfg.n_min)
            } else {
                cfg.n_period
            };
            EpochPlan {
                epoch,
                mixing,
                n_period,
            }
        })
        .collect()
}

/// Per-temperature pool of encoded training samples, rebuilt from the current
/// encoder each mixing epoch.
#[derive(Debug, Clone)]
pub struct StructPool {
    temperatures: Vec<f64>,
    groups: Vec<Vec<PoolEntry>>,
}

impl StructPool {
    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn group(&self, temperature: f64) -> Result<&[PoolEntry]> {
        self.temperatures
            .iter()
            .position(|&t| t == temperature)
            .map(|i| self.groups[i].as_slice())
            .ok_or(Error::UnknownTemperature(temperature))
    }

    pub fn total_len(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }
}

/// Encode every training conformation with the current encoder (read-only,
/// parallel over samples) and group the entries by temperature.
pub fn fill_pool(
    model: &SurrogateModel,
    store: &ParamStore,
    dataset: &Dataset,
) -> Result<StructPool> {
    let mut temperatures = Vec::new();
    let mut groups = Vec::new();
    for entry in dataset.train_entries() {
        if entry.conformations.is_empty() {
            continue;
        }
        let encoded = par_map(&entry.conformations, |conf| {
            model.encode_structure(store, conf)
        });
        let mut group = Vec::with_capacity(encoded.len());
        for (source, (conf, enc)) in entry.conformations.iter().zip(encoded).enumerate() {
            let (features, x_enc) = enc?;
            group.push(PoolEntry {
                temperature: entry.temperature,
                features,
                x_enc,
                x_gt: conf.target.clone(),
                source,
            });
        }
        temperatures.push(entry.temperature);
        groups.push(group);
    }
    if groups.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(StructPool {
        temperatures,
        groups,
    })
}

fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// Entry of temperature `t2` minimizing the mean squared feature difference
/// to `s1`; ties break toward the lowest source index.
pub fn nearest_struct<'p>(pool: &'p StructPool, t2: f64, s1: &[f64]) -> Result<&'p PoolEntry> {
    let group = pool.group(t2)?;
    group
        .iter()
        .min_by(|a, b| {
            feature_distance(&a.features, s1)
                .partial_cmp(&feature_distance(&b.features, s1))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.source.cmp(&b.source))
        })
        .ok_or(Error::UnknownTemperature(t2))
}

/// Capped variant: scan only `cap` entries (a seeded subsample) when the pool
/// is larger. With `cap >= pool size` this equals the exhaustive scan.
pub fn nearest_struct_capped<'p>(
    pool: &'p StructPool,
    t2: f64,
    s1: &[f64],
    cap: usize,
    rng: &mut ChaCha12Rng,
) -> Result<&'p PoolEntry> {
    let group = pool.group(t2)?;
    if group.is_empty() {
        return Err(Error::UnknownTemperature(t2));
    }
    if cap >= group.len() {
        return nearest_struct(pool, t2, s1);
    }
    let mut indices: Vec<usize> = (0..group.len()).collect();
    indices.shuffle(rng);
    indices.truncate(cap);
    indices.sort_unstable();
    let best = indices
        .into_iter()
        .map(|i| &group[i])
        .min_by(|a, b| {
            feature_distance(&a.features, s1)
                .partial_cmp(&feature_distance(&b.features, s1))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.source.cmp(&b.source))
        })
        .unwrap();
    Ok(best)
}

#[derive(Debug, Clone, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub mixing: bool,
    pub n_period: usize,
    pub real_steps: usize,
    pub mixed_backbone_steps: usize,
    pub mixer_steps: usize,
    pub real_loss_sum: f64,
    pub mixed_backbone_loss_sum: f64,
    pub mixer_loss_sum: f64,
    /// Sum of the per-step combined objective (real plus both mixed terms of
    /// that step).
    pub combined_loss_sum: f64,
}

pub struct PretrainOutput {
    pub store: ParamStore,
    pub epochs: Vec<EpochStats>,
}

struct MixDraw {
    entry: PoolEntry,
    lambda: f64,
}

fn draw_mix(
    model: &SurrogateModel,
    store: &ParamStore,
    pool: &StructPool,
    conf: &Conformation,
    scan_cap: Option<usize>,
    rng: &mut ChaCha12Rng,
) -> Result<MixDraw> {
    let others: Vec<f64> = pool
        .temperatures()
        .iter()
        .copied()
        .filter(|&t| t != conf.temperature)
        .collect();
    if others.is_empty() {
        return Err(Error::SingleTemperature);
    }
    let t2 = others[rng.random_range(0..others.len())];
    let lambda: f64 = rng.random_range(0.0..1.0);
    let (s1, _) = model.encode_structure(store, conf)?;
    let entry = match scan_cap {
        Some(cap) => nearest_struct_capped(pool, t2, &s1, cap, rng)?,
        None => nearest_struct(pool, t2, &s1)?,
    };
    Ok(MixDraw {
        entry: entry.clone(),
        lambda,
    })
}

fn ensure_finite(value: f64, epoch: usize, step: usize, detail: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NanLoss {
            epoch,
            step,
            detail: detail.to_string(),
        });
    }
    Ok(())
}

/// Run the full curriculum. `mixup = false` trains the same epoch budget with
/// mixing disabled throughout (the prompt-only baseline). The log receives
/// one structured line per step plus an epoch summary.
pub fn pretrain(
    model: &SurrogateModel,
    cfg: &Stage1Config,
    dataset: &Dataset,
    mixup: bool,
    seed: u64,
    log: &mut dyn Write,
    checkpoint_dir: Option<&Path>,
) -> Result<PretrainOutput> {
    let samples: Vec<&Conformation> = dataset
        .train_entries()
        .flat_map(|e| e.conformations.iter())
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if mixup && dataset.train_temperatures().len() < 2 {
        return Err(Error::SingleTemperature);
    }

    let mut store = init_model_params(&model.dims, derive_seed(seed, &[0]));
    let lion_cfg = LionConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..LionConfig::default()
    };
    let mut lion_backbone = Lion::new(lion_cfg.clone());
    let mut lion_mixers = Lion::new(lion_cfg);

    let schedule = curriculum_schedule(cfg.epochs, cfg);
    let mut report = Vec::with_capacity(schedule.len());

    for plan in &schedule {
        let mut stats = EpochStats {
            epoch: plan.epoch,
            mixing: plan.mixing && mixup,
            n_period: plan.n_period,
            ..EpochStats::default()
        };
        let epoch_seed = derive_seed(seed, &[plan.epoch as u64, 1]);
        writeln!(
            log,
            "epoch={} mixing={} n_period={} shuffle_seed={epoch_seed}",
            plan.epoch, stats.mixing, plan.n_period
        )?;

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(epoch_seed);
        order.shuffle(&mut shuffle_rng);

        if stats.mixing {
            let pool = fill_pool(model, &store, dataset)?;
            let mut pair_rng =
                ChaCha12Rng::seed_from_u64(derive_seed(seed, &[plan.epoch as u64, 2]));

            // Mixer pass: one epoch of mixer-side updates.
            for (step, &idx) in order.iter().enumerate() {
                let conf = samples[idx];
                let draw = draw_mix(model, &store, &pool, conf, cfg.scan_cap, &mut pair_rng)?;
                let (loss, grads) = model.mixed_loss_backward(
                    &store,
                    PartitionSet::PHI,
                    MixPass::Mixers,
                    conf,
                    &draw.entry,
                    draw.lambda,
                    true,
                )?;
                ensure_finite(loss, plan.epoch, step, "mixer loss")?;
                lion_mixers.step(&mut store, &grads, PartitionSet::PHI)?;
                stats.mixer_steps += 1;
                stats.mixer_loss_sum += loss;
                stats.combined_loss_sum += loss;
                if step % cfg.log_every == 0 {
                    writeln!(
                        log,
                        "epoch={} step={} kind=mixer loss={loss}",
                        plan.epoch, step
                    )?;
                }
            }

            // Backbone pass with periodic mixed updates.
            let mut reshuffle_rng =
                ChaCha12Rng::seed_from_u64(derive_seed(seed, &[plan.epoch as u64, 3]));
            order.shuffle(&mut reshuffle_rng);
            for (step, &idx) in order.iter().enumerate() {
                let conf = samples[idx];
                let (loss, grads) = model.real_loss_backward(&store, PartitionSet::THETA, conf)?;
                ensure_finite(loss, plan.epoch, step, "real loss")?;
                lion_backbone.step(&mut store, &grads, PartitionSet::THETA)?;
                stats.real_steps += 1;
                stats.real_loss_sum += loss;
                let mut combined = loss;

                if (step + 1) % plan.n_period == 0 {
                    let draw = draw_mix(model, &store, &pool, conf, cfg.scan_cap, &mut pair_rng)?;
                    let (mloss, mgrads) = model.mixed_loss_backward(
                        &store,
                        PartitionSet::THETA,
                        MixPass::Backbone,
                        conf,
                        &draw.entry,
                        draw.lambda,
                        true,
                    )?;
                    ensure_finite(mloss, plan.epoch, step, "mixed backbone loss")?;
                    lion_backbone.step(&mut store, &mgrads, PartitionSet::THETA)?;
                    stats.mixed_backbone_steps += 1;
                    stats.mixed_backbone_loss_sum += mloss;
                    combined += mloss;
                    if step % cfg.log_every == 0 {
                        writeln!(
                            log,
                            "epoch={} step={} kind=mixed_backbone loss={mloss}",
                            plan.epoch, step
                        )?;
                    }
                }
                stats.combined_loss_sum += combined;
                if step % cfg.log_every == 0 {
                    writeln!(
                        log,
                        "epoch={} step={} kind=real loss={loss}",
                        plan.epoch, step
                    )?;
                }
            }
        } else {
            for (step, &idx) in order.iter().enumerate() {
                let conf = samples[idx];
                let (loss, grads) = model.real_loss_backward(&store, PartitionSet::THETA, conf)?;
                ensure_finite(loss, plan.epoch, step, "real loss")?;
                lion_backbone.step(&mut store, &grads, PartitionSet::THETA)?;
                stats.real_steps += 1;
                stats.real_loss_sum += loss;
                stats.combined_loss_sum += loss;
                if step % cfg.log_every == 0 {
                    writeln!(
                        log,
                        "epoch={} step={} kind=real loss={loss}",
                        plan.epoch, step
                    )?;
                }
            }
        }

        writeln!(
            log,
            "epoch={} summary real_steps={} mixed_backbone_steps={} mixer_steps={} mean_real_loss={}",
            plan.epoch,
            stats.real_steps,
            stats.mixed_backbone_steps,
            stats.mixer_steps,
            if stats.real_steps > 0 {
                stats.real_loss_sum / stats.real_steps as f64
            } else {
                0.0
            }
        )?;

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_interval > 0 && plan.epoch % cfg.checkpoint_interval == 0 {
                save_checkpoint(&store, &dir.join(format!("epoch{:04}.ckpt", plan.epoch)))?;
            }
        }
        report.push(stats);
    }

    Ok(PretrainOutput {
        store,
        epochs: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdgen::{self, ChainSpec, SimConfig, TempSets};
    use crate::model::ModelDims;

    fn paper_hyper() -> Stage1Config {
        Stage1Config {
            epochs: 110,
            e_pre: 50,
            e_period: 10,
            n_period: 256,
            n_min: 16,
            ..Stage1Config::default()
        }
    }

    #[test]
    fn schedule_matches_hand_trace() {
        let cfg = paper_hyper();
        let plan = curriculum_schedule(110, &cfg);
        let at = |e: usize| &plan[e - 1];
        for e in 1..=50 {
            assert!(!at(e).mixing, "epoch {e} must not mix");
        }
        assert!(at(51).mixing);
        assert_eq!(at(51).n_period, 256);
        assert_eq!(at(60).n_period, 256);
        assert_eq!(at(61).n_period, 128);
        assert_eq!(at(71).n_period, 64);
        assert_eq!(at(81).n_period, 32);
        assert_eq!(at(91).n_period, 16);
        assert_eq!(at(101).n_period, 16, "floor at n_min");
        assert_eq!(at(110).n_period, 16);
    }

    #[test]
    fn schedule_never_halves_at_floor() {
        let cfg = Stage1Config {
            epochs: 40,
            e_pre: 5,
            e_period: 3,
            n_period: 16,
            n_min: 16,
            ..Stage1Config::default()
        };
        for plan in curriculum_schedule(40, &cfg) {
            assert_eq!(plan.n_period, 16);
        }
    }

    #[test]
    fn schedule_with_zero_pre_phase_mixes_immediately() {
        let cfg = Stage1Config {
            epochs: 4,
            e_pre: 0,
            e_period: 2,
            n_period: 8,
            n_min: 2,
            ..Stage1Config::default()
        };
        let plan = curriculum_schedule(4, &cfg);
        assert!(plan[0].mixing);
        assert_eq!(plan[0].n_period, 8);
        assert_eq!(plan[2].n_period, 4);
    }

    fn tiny_dataset(dir: &Path) -> Dataset {
        let chain = ChainSpec::default();
        let sim = SimConfig {
            dt: 0.004,
            friction: 8.0,
            stride: 200,
            train_frames: 25,
            test_frames: 10,
        };
        let temps = TempSets {
            train: vec![0.8, 1.2],
            unseen: vec![],
            ood: vec![],
        };
        mdgen::generate_dataset(&chain, &sim, &temps, 4, 17, dir).unwrap();
        mdgen::load_dataset(dir).unwrap()
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            n_bead_types: 10,
            d_h: 4,
            d_s: 6,
            d_p: 3,
            hidden: 8,
            prompt_hidden: 8,
            predictor_layers: 1,
            prompt_init_gain: 3.0,
        }
    }

    #[test]
    fn pool_sizes_and_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let model = SurrogateModel::new(tiny_dims());
        let store = init_model_params(&model.dims, 3);
        let pool = fill_pool(&model, &store, &ds).unwrap();
        assert_eq!(pool.temperatures(), &[0.8, 1.2]);
        assert_eq!(pool.group(0.8).unwrap().len(), 24);
        assert_eq!(pool.group(1.2).unwrap().len(), 24);
        assert!(matches!(pool.group(1.0), Err(Error::UnknownTemperature(_))));

        // Entries must track the encoder: perturb it and refill.
        let mut store2 = store.clone();
        store2
            .get_mut("struct_enc.layer0.phi_h.b2")
            .unwrap()
            .data
            .iter_mut()
            .for_each(|v| *v += 0.5);
        let pool2 = fill_pool(&model, &store2, &ds).unwrap();
        let before = &pool.group(0.8).unwrap()[0].features;
        let after = &pool2.group(0.8).unwrap()[0].features;
        assert!(before.iter().zip(after).any(|(a, b)| a != b));
    }

    #[test]
    fn nearest_struct_argmin_and_ties() {
        let entry = |temp: f64, source: usize, feat: f64| PoolEntry {
            temperature: temp,
            features: vec![feat; 4],
            x_enc: vec![0.0; 3],
            x_gt: vec![0.0; 3],
            source,
        };
        let pool = StructPool {
            temperatures: vec![1.2],
            groups: vec![vec![
                entry(1.2, 0, 0.3),
                entry(1.2, 1, 0.1),
                entry(1.2, 2, 0.1),
            ]],
        };
        let probe = vec![0.1; 4];
        // Exact self-match, tie broken by lowest source index.
        let hit = nearest_struct(&pool, 1.2, &probe).unwrap();
        assert_eq!(hit.source, 1);

        let probe2 = vec![0.25; 4];
        assert_eq!(nearest_struct(&pool, 1.2, &probe2).unwrap().source, 0);

        assert!(nearest_struct(&pool, 0.9, &probe).is_err());

        // Cap at least as large as the pool equals the exhaustive scan.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let capped = nearest_struct_capped(&pool, 1.2, &probe, 10, &mut rng).unwrap();
        assert_eq!(capped.source, hit.source);
    }

    #[test]
    fn mixed_update_counter_follows_modulo_rule() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let model = SurrogateModel::new(tiny_dims());
        let cfg = Stage1Config {
            epochs: 2,
            e_pre: 1,
            e_period: 5,
            n_period: 10,
            n_min: 2,
            lr: 1e-4,
            weight_decay: 1e-5,
            log_every: 1000,
            ..Stage1Config::default()
        };
        let mut log = Vec::new();
        let out = pretrain(&model, &cfg, &ds, true, 9, &mut log, None).unwrap();
        // 48 samples, n_period 10 -> exactly 4 mixed backbone updates.
        let mixing_epoch = &out.epochs[1];
        assert!(mixing_epoch.mixing);
        assert_eq!(mixing_epoch.real_steps, 48);
        assert_eq!(mixing_epoch.mixed_backbone_steps, 4);
        assert_eq!(mixing_epoch.mixer_steps, 48);
        // Plain epoch ran no mixed machinery.
        assert_eq!(out.epochs[0].mixer_steps, 0);
        assert_eq!(out.epochs[0].mixed_backbone_steps, 0);
    }

    #[test]
    fn no_mixup_never_touches_mixers() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let model = SurrogateModel::new(tiny_dims());
        let cfg = Stage1Config {
            epochs: 2,
            e_pre: 0,
            e_period: 1,
            n_period: 4,
            n_min: 2,
            log_every: 1000,
            ..Stage1Config::default()
        };
        let mut log = Vec::new();
        let out = pretrain(&model, &cfg, &ds, false, 11, &mut log, None).unwrap();
        let fresh = init_model_params(&model.dims, derive_seed(11, &[0]));
        assert!(out.store.partition_eq(&fresh, PartitionSet::PHI));
        assert!(!out.store.partition_eq(&fresh, PartitionSet::THETA));
        for e in &out.epochs {
            assert_eq!(e.mixer_steps, 0);
            assert_eq!(e.mixed_backbone_steps, 0);
        }
        let text = String::from_utf8(log).unwrap();
        assert!(!text.contains("kind=mixer"));
        assert!(!text.contains("kind=mixed_backbone"));
    }

    #[test]
    fn mixer_pass_and_backbone_pass_move_their_own_partitions() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let model = SurrogateModel::new(tiny_dims());
        // n_period larger than the dataset: the backbone pass does only real
        // steps, so any mixer drift must come from the mixer pass alone. Two
        // epochs because the mixer gradients stay exactly zero until the
        // first backbone pass lifts the coordinate heads off their zero init.
        let cfg = Stage1Config {
            epochs: 2,
            e_pre: 0,
            e_period: 3,
            n_period: 1_000_000,
            n_min: 2,
            log_every: 1000,
            ..Stage1Config::default()
        };
        let mut log = Vec::new();
        let out = pretrain(&model, &cfg, &ds, true, 13, &mut log, None).unwrap();
        let fresh = init_model_params(&model.dims, derive_seed(13, &[0]));
        assert!(
            !out.store.partition_eq(&fresh, PartitionSet::PHI),
            "mixers should have moved"
        );
        assert!(
            !out.store.partition_eq(&fresh, PartitionSet::THETA),
            "backbone should have moved"
        );
        assert_eq!(out.epochs[0].mixed_backbone_steps, 0);
        assert_eq!(out.epochs[1].mixed_backbone_steps, 0);
    }

    #[test]
    fn single_temperature_with_mixing_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let chain = ChainSpec::default();
        let sim = SimConfig {
            friction: 8.0,
            stride: 200,
            train_frames: 12,
            test_frames: 10,
            ..SimConfig::default()
        };
        let temps = TempSets {
            train: vec![1.0],
            unseen: vec![],
            ood: vec![],
        };
        mdgen::generate_dataset(&chain, &sim, &temps, 4, 5, dir.path()).unwrap();
        let ds = mdgen::load_dataset(dir.path()).unwrap();
        let model = SurrogateModel::new(tiny_dims());
        let cfg = Stage1Config {
            epochs: 1,
            e_pre: 0,
            ..Stage1Config::default()
        };
        let mut log = Vec::new();
        assert!(matches!(
            pretrain(&model, &cfg, &ds, true, 1, &mut log, None),
            Err(Error::SingleTemperature)
        ));
    }

    #[test]
    fn structure_features_track_geometry_scale() {
        // Consecutive frames of one trajectory differ by a small step, so
        // their structure features sit close; equilibrium frames from well
        // separated temperatures differ more on average.
        let dir = tempfile::tempdir().unwrap();
        let chain = ChainSpec::default();
        let sim = SimConfig {
            friction: 8.0,
            stride: 200,
            train_frames: 40,
            test_frames: 10,
            ..SimConfig::default()
        };
        let temps = TempSets {
            train: vec![0.8, 1.5],
            unseen: vec![],
            ood: vec![],
        };
        mdgen::generate_dataset(&chain, &sim, &temps, 4, 61, dir.path()).unwrap();
        let ds = mdgen::load_dataset(dir.path()).unwrap();
        let model = SurrogateModel::new(tiny_dims());
        let store = init_model_params(&model.dims, 62);
        let pool = fill_pool(&model, &store, &ds).unwrap();
        let cold = pool.group(0.8).unwrap();
        let hot = pool.group(1.5).unwrap();

        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        let mut consecutive = 0.0;
        for w in cold.windows(2) {
            consecutive += dist(&w[0].features, &w[1].features);
        }
        consecutive /= (cold.len() - 1) as f64;

        let mut cross = 0.0;
        let mut pairs = 0;
        for a in cold.iter().step_by(4) {
            for b in hot.iter().step_by(4) {
                cross += dist(&a.features, &b.features);
                pairs += 1;
            }
        }
        cross /= pairs as f64;
        assert!(
            cross > consecutive,
            "cross-temperature feature distance {cross} should exceed consecutive-frame distance {consecutive}"
        );
    }

    #[test]
    fn loss_bookkeeping_sums_components() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let model = SurrogateModel::new(tiny_dims());
        let cfg = Stage1Config {
            epochs: 2,
            e_pre: 1,
            e_period: 4,
            n_period: 7,
            n_min: 2,
            log_every: 1000,
            ..Stage1Config::default()
        };
        let mut log = Vec::new();
        let out = pretrain(&model, &cfg, &ds, true, 23, &mut log, None).unwrap();
        for e in &out.epochs {
            let parts = e.real_loss_sum + e.mixed_backbone_loss_sum + e.mixer_loss_sum;
            assert!(
                (e.combined_loss_sum - parts).abs() <= 1e-12 * parts.abs().max(1.0),
                "epoch {}: combined {} vs parts {}",
                e.epoch,
                e.combined_loss_sum,
                parts
            );
        }
    }
}
