//! Data-parallel hot paths, parallel vs sequential.
//!
//! With the default `parallel` feature the `par_*` helpers fan out over the
//! rayon pool; `seq_map` always runs in-line, so a single build can compare
//! both. Without the feature both sides run sequentially and should tie.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use promptmd_core::mdgen::{generate_trajectory, ChainSpec, SimConfig, TempSets};
use promptmd_core::model::{init_model_params, Conformation, ModelDims, SurrogateModel};
use promptmd_core::par::{par_map, seq_map};

fn bench_dims() -> ModelDims {
    ModelDims {
        n_bead_types: 10,
        d_h: 4,
        d_s: 16,
        d_p: 8,
        hidden: 32,
        prompt_hidden: 16,
        predictor_layers: 2,
        prompt_init_gain: 3.0,
    }
}

fn sample_conformations(n: usize) -> Vec<Conformation> {
    (0..n)
        .map(|k| {
            let base = k as f64 * 0.01;
            Conformation {
                positions: (0..30).map(|i| base + i as f64 * 0.11).collect(),
                bead_ids: (0..10).collect(),
                target: (0..30).map(|i| base + i as f64 * 0.11 + 0.01).collect(),
                temperature: 1.0,
            }
        })
        .collect()
}

/// Structure-encoding fan-out, the inner loop of pool filling.
fn bench_pool_fill(c: &mut Criterion) {
    let dims = bench_dims();
    let model = SurrogateModel::new(dims);
    let store = init_model_params(&dims, 7);
    let confs = sample_conformations(256);

    let mut group = c.benchmark_group("pool_fill_256");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let encoded = seq_map(&confs, |conf| model.encode_structure(&store, conf).unwrap());
            black_box(encoded.len())
        })
    });
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let encoded = par_map(&confs, |conf| model.encode_structure(&store, conf).unwrap());
            black_box(encoded.len())
        })
    });
    group.finish();
}

/// Per-temperature trajectory generation, the dataset fan-out.
fn bench_trajectories(c: &mut Criterion) {
    let chain = ChainSpec::default();
    let sim = SimConfig {
        stride: 50,
        train_frames: 40,
        test_frames: 40,
        ..SimConfig::default()
    };
    let temps: Vec<(usize, f64)> = TempSets::default()
        .train
        .iter()
        .chain(&TempSets::default().unseen)
        .copied()
        .enumerate()
        .collect();

    let mut group = c.benchmark_group("trajectories_9_temps");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let frames = seq_map(&temps, |(idx, t)| {
                generate_trajectory(&chain, &sim, *t, 40, 91 ^ *idx as u64)
                    .unwrap()
                    .0
                    .len()
            });
            black_box(frames)
        })
    });
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let frames = par_map(&temps, |(idx, t)| {
                generate_trajectory(&chain, &sim, *t, 40, 91 ^ *idx as u64)
                    .unwrap()
                    .0
                    .len()
            });
            black_box(frames)
        })
    });
    group.finish();
}

criterion_group!(benches, bench_pool_fill, bench_trajectories);
criterion_main!(benches);
