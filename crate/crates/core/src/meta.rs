//! Prompt meta-training: first-order adaptation of per-temperature prompt
//! copies, outer updates to the shared prompt initialization.
//!
//! Each epoch, every training temperature becomes a task. The task copies the
//! shared prompt encoder, takes `inner_steps` gradient steps on its support
//! loss (real plus mixed, backbone frozen), then updates its own prompt-mixer
//! copy on the mixer-side loss at the adapted prompt. The outer step applies
//! the summed query-loss gradients of the adapted copies to the shared
//! initialization through Adam. The structure mixer plays no part here: mixed
//! samples use the fixed interpolation for features and coordinates.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::engine::graph::{GradMap, Graph};
use crate::engine::optim::{sgd_step, Adam, AdamConfig};
use crate::engine::params::{ParamStore, Partition, PartitionSet};
use crate::error::{Error, Result};
use crate::mdgen::Dataset;
use crate::model::{Conformation, MixPass, SurrogateModel};
use crate::seeds::derive_seed;
use crate::stage1::{fill_pool, nearest_struct, StructPool};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MetaStageConfig {
    /// Prompt-mixer learning rate (inner).
    pub alpha: f64,
    /// Prompt learning rate (inner).
    pub beta: f64,
    /// Shared-initialization learning rate (outer, Adam).
    pub gamma: f64,
    pub inner_steps: usize,
    pub epochs: usize,
    pub support_fraction: f64,
    /// Cap on support samples per inner gradient (unset = full support).
    pub support_batch: Option<usize>,
    /// Cap on query samples per outer gradient (unset = full query).
    pub query_batch: Option<usize>,
}

impl Default for MetaStageConfig {
    fn default() -> Self {
        MetaStageConfig {
            alpha: 1e-3,
            beta: 0.01,
            gamma: 1e-3,
            inner_steps: 1,
            epochs: 5,
            support_fraction: 0.5,
            support_batch: None,
            query_batch: None,
        }
    }
}

/// Disjoint, exhaustive, seed-deterministic index split.
pub fn split_support_query(
    n: usize,
    fraction: f64,
    temperature: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::TooFewSamples {
            temperature,
            have: n,
            need: 2,
        });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let cut = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let query = indices.split_off(cut);
    Ok((indices, query))
}

#[derive(Debug, Clone)]
pub struct MetaTask {
    pub temperature: f64,
    pub support: Vec<Conformation>,
    pub query: Vec<Conformation>,
}

/// One task per training temperature, ascending order for reproducibility.
pub fn build_tasks(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Vec<MetaTask>> {
    let mut entries: Vec<_> = dataset.train_entries().collect();
    entries.sort_by(|a, b| a.temperature.partial_cmp(&b.temperature).unwrap());
    let mut tasks = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let (sup, que) = split_support_query(
            entry.conformations.len(),
            fraction,
            entry.temperature,
            derive_seed(seed, &[40, i as u64]),
        )?;
        tasks.push(MetaTask {
            temperature: entry.temperature,
            support: sup.into_iter().map(|k| entry.conformations[k].clone()).collect(),
            query: que.into_iter().map(|k| entry.conformations[k].clone()).collect(),
        });
    }
    if tasks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(tasks)
}

fn batch_indices(len: usize, cap: Option<usize>, rng: &mut ChaCha12Rng) -> Vec<usize> {
    match cap {
        Some(c) if c < len => {
            let mut idx: Vec<usize> = (0..len).collect();
            idx.shuffle(rng);
            idx.truncate(c);
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Mean gradient of (real + mixed-backbone) loss over a batch with respect to
/// the partitions in `live`. StructMix is bypassed: mixed features and
/// coordinates are fixed interpolations.
fn combined_loss_grads(
    model: &SurrogateModel,
    store: &ParamStore,
    live: PartitionSet,
    batch: &[&Conformation],
    pool: &StructPool,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, GradMap)> {
    let mut total = GradMap::new();
    let mut loss_sum = 0.0;
    for conf in batch {
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
        let entry = nearest_struct(pool, t2, &s1)?;

        let mut g = Graph::new();
        let pred = model.predict_graph(&mut g, store, live, conf)?;
        let target = g.constant(conf.target.clone(), conf.n(), 3);
        let real = g.mse(pred, target)?;
        let mixed = model.mixed_forward_graph(
            &mut g,
            store,
            live,
            MixPass::Backbone,
            conf,
            entry,
            lambda,
            false,
        )?;
        let mixed_target = g.constant(mixed.target.clone(), conf.n(), 3);
        let mixed_loss = g.mse(mixed.prediction, mixed_target)?;
        let loss = g.add(real, mixed_loss)?;
        g.backward(loss)?;
        loss_sum += g.scalar_value(loss);
        total.accumulate(&g.grads_by_name());
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    total.scale(scale);
    Ok((loss_sum * scale, total))
}

/// Mean mixer-side gradient over a batch (evaluated at the adapted prompt).
fn mixer_loss_grads(
    model: &SurrogateModel,
    store: &ParamStore,
    batch: &[&Conformation],
    pool: &StructPool,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, GradMap)> {
    let mut total = GradMap::new();
    let mut loss_sum = 0.0;
    for conf in batch {
        let others: Vec<f64> = pool
            .temperatures()
            .iter()
            .copied()
            .filter(|&t| t != conf.temperature)
            .collect();
        let t2 = others[rng.random_range(0..others.len())];
        let lambda: f64 = rng.random_range(0.0..1.0);
        let (s1, _) = model.encode_structure(store, conf)?;
        let entry = nearest_struct(pool, t2, &s1)?;
        let (loss, grads) = model.mixed_loss_backward(
            store,
            PartitionSet::PROMPT_MIX,
            MixPass::Mixers,
            conf,
            entry,
            lambda,
            false,
        )?;
        loss_sum += loss;
        total.accumulate(&grads);
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    total.scale(scale);
    Ok((loss_sum * scale, total))
}

/// Plain mean query/support loss at the current parameters (no gradients).
fn mean_real_loss(
    model: &SurrogateModel,
    store: &ParamStore,
    batch: &[&Conformation],
) -> Result<f64> {
    let mut sum = 0.0;
    for conf in batch {
        let mut g = Graph::new();
        let pred = model.predict_graph(&mut g, store, PartitionSet::NONE, conf)?;
        let target = g.constant(conf.target.clone(), conf.n(), 3);
        let loss = g.mse(pred, target)?;
        sum += g.scalar_value(loss);
    }
    Ok(sum / batch.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TaskStats {
    pub temperature: f64,
    pub support_loss_before: f64,
    pub support_loss_after: f64,
    pub query_loss: f64,
}

#[derive(Debug, Clone)]
pub struct MetaEpochStats {
    pub epoch: usize,
    pub tasks: Vec<TaskStats>,
    pub outer_grad_norm: f64,
    pub outer_steps: usize,
}

pub struct MetaOutput {
    pub store: ParamStore,
    pub epochs: Vec<MetaEpochStats>,
}

/// Inner adaptation of one task: `inner_steps` prompt steps on the support
/// loss, then one prompt-mixer step at the adapted prompt. The shared
/// initialization is never touched; `work` is the task's private copy.
pub fn inner_adapt(
    model: &SurrogateModel,
    work: &mut ParamStore,
    task: &MetaTask,
    pool: &StructPool,
    cfg: &MetaStageConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64)> {
    let support_refs: Vec<&Conformation> = task.support.iter().collect();
    let before = mean_real_loss(model, work, &support_refs)?;

    for _ in 0..cfg.inner_steps {
        let batch: Vec<&Conformation> =
            batch_indices(task.support.len(), cfg.support_batch, rng)
                .into_iter()
                .map(|k| &task.support[k])
                .collect();
        let (_, grads) =
            combined_loss_grads(model, work, PartitionSet::PROMPT, &batch, pool, rng)?;
        sgd_step(work, &grads, cfg.beta, PartitionSet::PROMPT)?;
    }

    // Mixer update at the adapted prompt.
    let batch: Vec<&Conformation> = batch_indices(task.support.len(), cfg.support_batch, rng)
        .into_iter()
        .map(|k| &task.support[k])
        .collect();
    let (_, mixer_grads) = mixer_loss_grads(model, work, &batch, pool, rng)?;
    sgd_step(work, &mixer_grads, cfg.alpha, PartitionSet::PROMPT_MIX)?;

    let after = mean_real_loss(model, work, &support_refs)?;
    Ok((before, after))
}

/// Query-side gradient of one adapted task with respect to its prompt copy;
/// first-order: applied unchanged to the shared initialization.
pub fn outer_task_grads(
    model: &SurrogateModel,
    work: &ParamStore,
    task: &MetaTask,
    pool: &StructPool,
    cfg: &MetaStageConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, GradMap)> {
    let batch: Vec<&Conformation> = batch_indices(task.query.len(), cfg.query_batch, rng)
        .into_iter()
        .map(|k| &task.query[k])
        .collect();
    combined_loss_grads(model, work, PartitionSet::PROMPT, &batch, pool, rng)
}

/// Full meta stage. Requires a first-stage checkpoint carrying prompt,
/// backbone and prompt-mixer partitions. Returns a checkpoint whose PROMPT
/// partition is the meta-learned initialization, with the backbone and
/// structure mixer bitwise untouched and per-task prompt-mixer copies stored
/// under task-suffixed names.
pub fn meta_train(
    model: &SurrogateModel,
    cfg: &MetaStageConfig,
    stage1_store: &ParamStore,
    dataset: &Dataset,
    seed: u64,
    log: &mut dyn Write,
) -> Result<MetaOutput> {
    for (partition, name) in [
        (Partition::Prompt, "PROMPT"),
        (Partition::Backbone, "BACKBONE"),
        (Partition::PromptMix, "PROMPTMIX"),
    ] {
        if !stage1_store.has_partition(partition) {
            return Err(Error::MissingPartition(name));
        }
    }

    let mut shared = stage1_store.clone();
    // The encoder is frozen for the whole stage, so the pool is built once.
    let pool = fill_pool(model, &shared, dataset)?;
    let tasks = build_tasks(dataset, cfg.support_fraction, seed)?;

    // Per-task mixer copies persist across epochs; epoch one starts from the
    // first-stage weights.
    let mut task_mixers: Vec<ParamStore> = tasks
        .iter()
        .map(|_| shared.clone_partition(PartitionSet::PROMPT_MIX))
        .collect();

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.gamma,
        ..AdamConfig::default()
    });

    let mut report = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut outer = GradMap::new();
        let mut stats = Vec::with_capacity(tasks.len());
        for (i, task) in tasks.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                seed,
                &[50, epoch as u64, i as u64],
            ));
            let mut work = shared.clone();
            work.write_back(&task_mixers[i])?;
            let (before, after) = inner_adapt(model, &mut work, task, &pool, cfg, &mut rng)?;
            task_mixers[i] = work.clone_partition(PartitionSet::PROMPT_MIX);
            let (query_loss, grads) =
                outer_task_grads(model, &work, task, &pool, cfg, &mut rng)?;
            // Summed over tasks, not averaged.
            outer.accumulate(&grads);
            writeln!(
                log,
                "epoch={epoch} task={} T={} support_before={before} support_after={after} query={query_loss}",
                i, task.temperature
            )?;
            stats.push(TaskStats {
                temperature: task.temperature,
                support_loss_before: before,
                support_loss_after: after,
                query_loss,
            });
        }
        let norm = outer.l2_norm();
        adam.step(&mut shared, &outer, PartitionSet::PROMPT)?;
        writeln!(log, "epoch={epoch} outer_step=1 outer_grad_norm={norm}")?;
        report.push(MetaEpochStats {
            epoch,
            tasks: stats,
            outer_grad_norm: norm,
            outer_steps: 1,
        });
    }

    // Persist per-task mixer copies under suffixed names.
    for (i, mixer) in task_mixers.iter().enumerate() {
        for (name, param) in mixer.iter() {
            shared.insert(format!("{name}@task{i}"), param.clone());
        }
    }

    Ok(MetaOutput {
        store: shared,
        epochs: report,
    })
}
