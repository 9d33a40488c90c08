//! Test-time protocol: per-temperature prompt fine-tuning on a support split,
//! MSE evaluation on the query split, repeated over trials; the persistence
//! baseline; and the prompt-embedding export with a 2-D principal-component
//! projection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::engine::graph::Graph;
use crate::engine::optim::sgd_step;
use crate::engine::params::{ParamStore, PartitionSet};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::mdgen::{mean_step_displacement, Dataset, Split};
use crate::meta::split_support_query;
use crate::model::{Conformation, SurrogateModel};
use crate::par::par_map;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ProtocolConfig {
    pub finetune_epochs: usize,
    pub trials: usize,
    pub support_fraction: f64,
    pub finetune_lr: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            finetune_epochs: 3,
            trials: 5,
            support_fraction: 0.5,
            finetune_lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    PromptOnly,
    NoMeta,
    Full,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::PromptOnly => "prompt_only",
            Method::NoMeta => "no_meta",
            Method::Full => "full",
        }
    }
}

/// Test data for one temperature. Training temperatures evaluate on the tail
/// of their training trajectory; the other splits use their whole file.
#[derive(Debug, Clone)]
pub struct EvalPool {
    pub temperature: f64,
    pub split: Split,
    pub conformations: Vec<Conformation>,
}

pub fn build_eval_pools(dataset: &Dataset) -> Vec<EvalPool> {
    let per_temp = dataset.manifest.sim.test_frames.saturating_sub(1) as usize;
    dataset
        .entries
        .iter()
        .map(|entry| {
            let confs = match entry.split {
                Split::Train => {
                    let skip = entry.conformations.len().saturating_sub(per_temp);
                    entry.conformations[skip..].to_vec()
                }
                _ => entry.conformations.clone(),
            };
            EvalPool {
                temperature: entry.temperature,
                split: entry.split,
                conformations: confs,
            }
        })
        .collect()
}

/// Prompt-only fine-tuning: per-sample gradient steps on the plain loss, all
/// other partitions untouched, no mixing anywhere.
pub fn finetune_prompt(
    model: &SurrogateModel,
    store: &mut ParamStore,
    support: &[Conformation],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    if support.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..support.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        for (step, &idx) in order.iter().enumerate() {
            let (loss, grads) =
                model.real_loss_backward(store, PartitionSet::PROMPT, &support[idx])?;
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    step,
                    detail: "fine-tune loss".into(),
                });
            }
            sgd_step(store, &grads, lr, PartitionSet::PROMPT)?;
        }
    }
    Ok(())
}

/// Mean per-sample loss over a query set (read-only, parallel).
pub fn evaluate(model: &SurrogateModel, store: &ParamStore, query: &[Conformation]) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let losses = par_map(query, |conf| -> Result<f64> {
        let mut g = Graph::new();
        let pred = model.predict_graph(&mut g, store, PartitionSet::NONE, conf)?;
        let target = g.constant(conf.target.clone(), conf.n(), 3);
        let loss = g.mse(pred, target)?;
        Ok(g.scalar_value(loss))
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / query.len() as f64)
}

/// The trivial predictor "next = current": the sanity floor every learned
/// surrogate must beat.
pub fn persistence_baseline(confs: &[Conformation]) -> f64 {
    mean_step_displacement(confs)
}

#[derive(Debug, Clone)]
pub struct TempResult {
    pub temperature: f64,
    pub split: Split,
    pub trial_mse: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SetResult {
    pub split: Split,
    /// Per trial: average over the set's temperatures.
    pub per_trial: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct MethodReport {
    pub method: Method,
    pub temps: Vec<TempResult>,
    pub sets: Vec<SetResult>,
}

#[derive(Debug, Clone)]
pub struct ReportTable {
    pub methods: Vec<MethodReport>,
    pub protocol: ProtocolConfig,
    pub seed: u64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ReportTable {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    /// Aggregate mean over trials for (method, split).
    pub fn set_mean(&self, m: Method, split: Split) -> Option<f64> {
        self.method(m)?
            .sets
            .iter()
            .find(|s| s.split == split)
            .map(|s| s.mean)
    }

    /// Stored aggregates must equal what the per-trial data recomputes to.
    pub fn verify_consistency(&self) -> Result<()> {
        for mr in &self.methods {
            for set in &mr.sets {
                let temps: Vec<&TempResult> =
                    mr.temps.iter().filter(|t| t.split == set.split).collect();
                for (trial, &stored) in set.per_trial.iter().enumerate() {
                    let recomputed = temps.iter().map(|t| t.trial_mse[trial]).sum::<f64>()
                        / temps.len() as f64;
                    if (recomputed - stored).abs() > 1e-12 {
                        return Err(Error::Contract(format!(
                            "report inconsistency: {} {} trial {trial}",
                            mr.method.label(),
                            set.split.label()
                        )));
                    }
                }
                let (mean, std) = mean_std(&set.per_trial);
                if (mean - set.mean).abs() > 1e-12 || (std - set.std).abs() > 1e-12 {
                    return Err(Error::Contract(format!(
                        "report aggregate inconsistency: {} {}",
                        mr.method.label(),
                        set.split.label()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Raw per-trial rows: method, temp_set, temperature, trial, mse.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,temp_set,temperature,trial,mse\n");
        for mr in &self.methods {
            for t in &mr.temps {
                for (trial, mse) in t.trial_mse.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        mr.method.label(),
                        t.split.label(),
                        t.temperature,
                        trial,
                        mse
                    ));
                }
            }
        }
        out
    }

    /// Human-readable aggregate table: one row per method and temperature
    /// set, with per-trial set averages.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "seed={} trials={} finetune_epochs={} support_fraction={} finetune_lr={}\n",
            self.seed,
            self.protocol.trials,
            self.protocol.finetune_epochs,
            self.protocol.support_fraction,
            self.protocol.finetune_lr
        ));
        out.push_str("method       temp_set  ");
        for t in 0..self.protocol.trials {
            out.push_str(&format!("trial_{:<9}", t + 1));
        }
        out.push_str("mean        std\n");
        for mr in &self.methods {
            for set in &mr.sets {
                out.push_str(&format!(
                    "{:<12} {:<9} ",
                    mr.method.label(),
                    set.split.label()
                ));
                for v in &set.per_trial {
                    out.push_str(&format!("{:<15.6} ", v));
                }
                if self.protocol.trials > 1 {
                    out.push_str(&format!("{:<11.6} {:.6}\n", set.mean, set.std));
                } else {
                    out.push_str(&format!("{:<11.6}\n", set.mean));
                }
            }
        }
        out.push_str("\nper-temperature means over trials\n");
        for mr in &self.methods {
            for t in &mr.temps {
                let (mean, _) = mean_std(&t.trial_mse);
                out.push_str(&format!(
                    "{:<12} {:<9} T={:<6} {:.6}\n",
                    mr.method.label(),
                    t.split.label(),
                    t.temperature,
                    mean
                ));
            }
        }
        out
    }
}

/// Full protocol: for every method, temperature and trial draw a fresh
/// support/query split (shared across methods for a fair comparison),
/// fine-tune the prompt from the method's checkpoint, and evaluate on the
/// query half. Trials run in parallel on private parameter copies.
pub fn run_protocol(
    model: &SurrogateModel,
    checkpoints: &[(Method, &ParamStore)],
    pools: &[EvalPool],
    protocol: &ProtocolConfig,
    seed: u64,
) -> Result<ReportTable> {
    if checkpoints.is_empty() || pools.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if protocol.trials == 0 {
        return Err(Error::Config {
            field: "protocol.trials".into(),
            message: "at least one trial required".into(),
        });
    }

    struct Job {
        method_idx: usize,
        temp_idx: usize,
        trial: usize,
    }
    let mut jobs = Vec::new();
    for method_idx in 0..checkpoints.len() {
        for temp_idx in 0..pools.len() {
            for trial in 0..protocol.trials {
                jobs.push(Job {
                    method_idx,
                    temp_idx,
                    trial,
                });
            }
        }
    }

    let results = par_map(&jobs, |job| -> Result<f64> {
        let pool = &pools[job.temp_idx];
        let (sup_idx, que_idx) = split_support_query(
            pool.conformations.len(),
            protocol.support_fraction,
            pool.temperature,
            derive_seed(seed, &[60, job.temp_idx as u64, job.trial as u64]),
        )?;
        let support: Vec<Conformation> = sup_idx
            .into_iter()
            .map(|k| pool.conformations[k].clone())
            .collect();
        let query: Vec<Conformation> = que_idx
            .into_iter()
            .map(|k| pool.conformations[k].clone())
            .collect();
        let mut store = checkpoints[job.method_idx].1.clone();
        finetune_prompt(
            model,
            &mut store,
            &support,
            protocol.finetune_epochs,
            protocol.finetune_lr,
            derive_seed(seed, &[61, job.temp_idx as u64, job.trial as u64]),
        )?;
        evaluate_sequential(model, &store, &query)
    });

    let mut methods = Vec::new();
    for (method_idx, (method, _)) in checkpoints.iter().enumerate() {
        let mut temps = Vec::new();
        for (temp_idx, pool) in pools.iter().enumerate() {
            let mut trial_mse = Vec::with_capacity(protocol.trials);
            for trial in 0..protocol.trials {
                let job_pos = method_idx * pools.len() * protocol.trials
                    + temp_idx * protocol.trials
                    + trial;
                trial_mse.push(results[job_pos].as_ref().map_err(clone_err)?.to_owned());
            }
            temps.push(TempResult {
                temperature: pool.temperature,
                split: pool.split,
                trial_mse,
            });
        }
        let mut sets = Vec::new();
        for split in [Split::Train, Split::Unseen, Split::Ood] {
            let members: Vec<&TempResult> =
                temps.iter().filter(|t| t.split == split).collect();
            if members.is_empty() {
                continue;
            }
            let per_trial: Vec<f64> = (0..protocol.trials)
                .map(|trial| {
                    members.iter().map(|t| t.trial_mse[trial]).sum::<f64>()
                        / members.len() as f64
                })
                .collect();
            let (mean, std) = mean_std(&per_trial);
            sets.push(SetResult {
                split,
                per_trial,
                mean,
                std,
            });
        }
        methods.push(MethodReport {
            method: *method,
            temps,
            sets,
        });
    }

    let table = ReportTable {
        methods,
        protocol: protocol.clone(),
        seed,
    };
    table.verify_consistency()?;
    Ok(table)
}

// Inside parallel jobs the per-sample loop stays sequential.
fn evaluate_sequential(
    model: &SurrogateModel,
    store: &ParamStore,
    query: &[Conformation],
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = 0.0;
    for conf in query {
        let mut g = Graph::new();
        let pred = model.predict_graph(&mut g, store, PartitionSet::NONE, conf)?;
        let target = g.constant(conf.target.clone(), conf.n(), 3);
        let loss = g.mse(pred, target)?;
        sum += g.scalar_value(loss);
    }
    Ok(sum / query.len() as f64)
}

fn clone_err(e: &Error) -> Error {
    Error::Contract(format!("evaluation job failed: {e}"))
}

#[derive(Debug, Clone)]
pub struct PromptRow {
    pub temperature: f64,
    pub split: Split,
    pub trial: usize,
    pub vector: Vec<f64>,
    pub pc: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct PromptExport {
    pub rows: Vec<PromptRow>,
    /// Fraction of total variance captured by the first two components.
    pub variance_explained: f64,
}

impl PromptExport {
    /// Columns: temperature, trial, the d_p prompt entries, pc1, pc2.
    pub fn to_csv(&self) -> String {
        let d_p = self.rows.first().map(|r| r.vector.len()).unwrap_or(0);
        let mut out = String::from("temperature,trial");
        for k in 0..d_p {
            out.push_str(&format!(",p{k}"));
        }
        out.push_str(",pc1,pc2\n");
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.temperature, row.trial));
            for v in &row.vector {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{},{}\n", row.pc[0], row.pc[1]));
        }
        out
    }
}

/// Center rows, eigendecompose the covariance, project onto the top two
/// components. Degenerate inputs (all rows equal) project to the origin.
pub fn pca_project(rows: &[Vec<f64>]) -> (Vec<[f64; 2]>, f64) {
    let k = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if k == 0 || d == 0 {
        return (Vec::new(), 0.0);
    }
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= k as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in rows {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (k.max(2) - 1) as f64;
    for v in cov.iter_mut() {
        *v /= denom;
    }
    let (vals, vecs) = symmetric_eigen(&cov, d);
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let explained = if total > 0.0 {
        (vals[0].max(0.0) + if d > 1 { vals[1].max(0.0) } else { 0.0 }) / total
    } else {
        0.0
    };
    let projections = rows
        .iter()
        .map(|row| {
            let mut pc = [0.0; 2];
            for (c, slot) in pc.iter_mut().enumerate().take(d.min(2)) {
                *slot = (0..d).map(|a| (row[a] - mean[a]) * vecs[a * d + c]).sum();
            }
            pc
        })
        .collect();
    (projections, explained)
}

/// Fine-tune the prompt per temperature and trial from one checkpoint, and
/// export the adapted prompt vectors with their 2-D projection.
pub fn export_prompts(
    model: &SurrogateModel,
    store: &ParamStore,
    pools: &[EvalPool],
    protocol: &ProtocolConfig,
    seed: u64,
) -> Result<PromptExport> {
    let mut distinct: Vec<f64> = pools.iter().map(|p| p.temperature).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Contract(
            "prompt export needs at least two distinct temperatures".into(),
        ));
    }

    struct Job {
        temp_idx: usize,
        trial: usize,
    }
    let mut jobs = Vec::new();
    for temp_idx in 0..pools.len() {
        for trial in 0..protocol.trials {
            jobs.push(Job { temp_idx, trial });
        }
    }
    let vectors = par_map(&jobs, |job| -> Result<Vec<f64>> {
        let pool = &pools[job.temp_idx];
        let (sup_idx, _) = split_support_query(
            pool.conformations.len(),
            protocol.support_fraction,
            pool.temperature,
            derive_seed(seed, &[60, job.temp_idx as u64, job.trial as u64]),
        )?;
        let support: Vec<Conformation> = sup_idx
            .into_iter()
            .map(|k| pool.conformations[k].clone())
            .collect();
        let mut adapted = store.clone();
        finetune_prompt(
            model,
            &mut adapted,
            &support,
            protocol.finetune_epochs,
            protocol.finetune_lr,
            derive_seed(seed, &[61, job.temp_idx as u64, job.trial as u64]),
        )?;
        model.encode_prompt(&adapted, pool.temperature)
    });

    let mut collected = Vec::with_capacity(jobs.len());
    for v in vectors {
        collected.push(v.map_err(|e| Error::Contract(format!("prompt export failed: {e}")))?);
    }
    let (projections, variance_explained) = pca_project(&collected);
    let rows = jobs
        .iter()
        .zip(collected)
        .zip(projections)
        .map(|((job, vector), pc)| PromptRow {
            temperature: pools[job.temp_idx].temperature,
            split: pools[job.temp_idx].split,
            trial: job.trial,
            vector,
            pc,
        })
        .collect();
    Ok(PromptExport {
        rows,
        variance_explained,
    })
}

/// Nearest-centroid classification accuracy of prompt rows by temperature,
/// plus the gap between one held-out group's centroid and the others.
pub fn centroid_separability(rows: &[PromptRow]) -> f64 {
    let mut temps: Vec<f64> = rows.iter().map(|r| r.temperature).collect();
    temps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    temps.dedup();
    let centroid = |t: f64| -> Vec<f64> {
        let members: Vec<&PromptRow> = rows.iter().filter(|r| r.temperature == t).collect();
        let d = members[0].vector.len();
        let mut c = vec![0.0; d];
        for m in &members {
            for (acc, v) in c.iter_mut().zip(&m.vector) {
                *acc += v;
            }
        }
        for v in c.iter_mut() {
            *v /= members.len() as f64;
        }
        c
    };
    let centroids: Vec<(f64, Vec<f64>)> = temps.iter().map(|&t| (t, centroid(t))).collect();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let correct = rows
        .iter()
        .filter(|row| {
            let best = centroids
                .iter()
                .min_by(|(_, ca), (_, cb)| {
                    dist2(&row.vector, ca)
                        .partial_cmp(&dist2(&row.vector, cb))
                        .unwrap()
                })
                .map(|(t, _)| *t)
                .unwrap();
            best == row.temperature
        })
        .count();
    correct as f64 / rows.len() as f64
}
