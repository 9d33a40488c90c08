// Scratch diagnostics for the acceptance experiment (not shipped).
use std::time::Instant;

use promptmd_core::evalkit::{
    build_eval_pools, persistence_baseline, run_protocol, Method, ProtocolConfig,
};
use promptmd_core::mdgen::{
    generate_dataset, load_dataset, mean_step_displacement, ChainSpec, SimConfig, Split, TempSets,
};
use promptmd_core::meta::{meta_train, MetaStageConfig};
use promptmd_core::model::{ModelDims, SurrogateModel};
use promptmd_core::stage1::{pretrain, Stage1Config};

fn main() {
    let gain: f64 = std::env::var("DIAG_GAIN").ok().and_then(|v| v.parse().ok()).unwrap_or(3.0);
    let dims = ModelDims {
        n_bead_types: 10,
        d_h: 4,
        d_s: 16,
        d_p: 8,
        hidden: 32,
        prompt_hidden: 16,
        predictor_layers: 2,
        prompt_init_gain: gain,
    };
    let chain = ChainSpec {
        n_beads: 10,
        bond_k: 100.0,
        bond_r0: 1.0,
        angle_k: 6.0,
        repulsion: 2.0,
        mass: 1.0,
    };
    let sim = SimConfig {
        dt: 0.01,
        friction: 0.5,
        stride: 400,
        train_frames: 2000,
        test_frames: 2000,
    };
    let n_period: usize = std::env::var("DIAG_NPERIOD").ok().and_then(|v| v.parse().ok()).unwrap_or(64);
    let epochs: usize = std::env::var("DIAG_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
    let e_pre: usize = std::env::var("DIAG_EPRE").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
    let meta_epochs: usize = std::env::var("DIAG_META_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
    let stage1 = Stage1Config {
        epochs,
        e_pre,
        e_period: 2,
        n_period,
        n_min: n_period.min(4),
        log_every: 1_000_000,
        ..Stage1Config::default()
    };
    let meta_cfg = MetaStageConfig {
        epochs: meta_epochs,
        support_batch: Some(128),
        query_batch: Some(128),
        ..MetaStageConfig::default()
    };

    let eval_cap: usize = std::env::var("DIAG_EVAL_CAP").ok().and_then(|v| v.parse().ok()).unwrap_or(200);
    let seeds: Vec<u64> = std::env::var("DIAG_SEEDS")
        .unwrap_or_else(|_| "101,202,303,404,505".into())
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    for seed in seeds {
        let t0 = Instant::now();
        let model = SurrogateModel::new(dims);
        let dir = std::path::PathBuf::from(format!("/tmp/diag2_seed{seed}"));
        if !dir.join("manifest.json").exists() {
            generate_dataset(&chain, &sim, &TempSets::default(), dims.d_h as u32, seed, &dir)
                .unwrap();
        }
        let dataset = load_dataset(&dir).unwrap();

        println!("== seed {seed} ==");
        let mut worst_kin = 0.0f64;
        for e in &dataset.manifest.entries {
            let rel = (e.kinetic_temperature - e.temperature).abs() / e.temperature;
            worst_kin = worst_kin.max(rel);
            if rel > 0.03 {
                println!(
                    "  kinetic outlier T={} measured {} ({:.2}%)",
                    e.temperature,
                    e.kinetic_temperature,
                    rel * 100.0
                );
            }
        }
        println!("  worst kinetic deviation {:.2}%", worst_kin * 100.0);
        let mut disp: Vec<(f64, f64)> = dataset
            .entries
            .iter()
            .map(|e| (e.temperature, mean_step_displacement(&e.conformations)))
            .collect();
        disp.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let disp_str: Vec<String> = disp.iter().map(|(t, d)| format!("{t}:{d:.5}")).collect();
        println!("  displacement by T: {}", disp_str.join(" "));

        let mut sink = std::io::sink();
        let po_path = dir.join(format!("po_np{n_period}_g{gain}_e{epochs}.ckpt"));
        let nm_path = dir.join(format!("nm_np{n_period}_g{gain}_e{epochs}.ckpt"));
        let (po_store, nm_store) = if po_path.exists() && nm_path.exists() {
            (
                promptmd_core::engine::load_checkpoint(&po_path).unwrap(),
                promptmd_core::engine::load_checkpoint(&nm_path).unwrap(),
            )
        } else {
            let po = pretrain(&model, &stage1, &dataset, false, seed, &mut sink, None).unwrap();
            let nm = pretrain(&model, &stage1, &dataset, true, seed, &mut sink, None).unwrap();
            promptmd_core::engine::save_checkpoint(&po.store, &po_path).unwrap();
            promptmd_core::engine::save_checkpoint(&nm.store, &nm_path).unwrap();
            (po.store, nm.store)
        };
        let full = meta_train(&model, &meta_cfg, &nm_store, &dataset, seed, &mut sink).unwrap();

        let mut pools = build_eval_pools(&dataset);
        for p in pools.iter_mut() {
            p.conformations.truncate(eval_cap);
        }

        // Prompt utility: does evaluating the ood pool with a wrong
        // prompt temperature cost anything?
        for (label, store) in [("po", &po_store), ("nm", &nm_store)] {
            let ood_pool = pools.iter().find(|p| p.split == Split::Ood).unwrap();
            let right = promptmd_core::evalkit::evaluate(&model, store, &ood_pool.conformations).unwrap();
            let wrong: Vec<_> = ood_pool.conformations.iter().map(|c| {
                let mut c2 = c.clone();
                c2.temperature = 1.2;
                c2
            }).collect();
            let wrong_mse = promptmd_core::evalkit::evaluate(&model, store, &wrong).unwrap();
            println!("  prompt-utility {:<4} ood with T=1.5 prompt {right:.5} vs T=1.2 prompt {wrong_mse:.5} (delta {:+.5})", label, wrong_mse - right);
        }

        // Zero-shot comparison before any fine-tuning.
        for (label, store) in [("po", &po_store), ("nm", &nm_store), ("full", &full.store)] {
            let per_split = |split: Split| -> f64 {
                let members: Vec<f64> = pools
                    .iter()
                    .filter(|p| p.split == split)
                    .map(|p| promptmd_core::evalkit::evaluate(&model, store, &p.conformations).unwrap())
                    .collect();
                members.iter().sum::<f64>() / members.len() as f64
            };
            println!(
                "  zero-shot {:<5} train {:.5} unseen {:.5} ood {:.5}",
                label,
                per_split(Split::Train),
                per_split(Split::Unseen),
                per_split(Split::Ood)
            );
        }
        let protocol = ProtocolConfig::default();
        let ckpts = vec![
            (Method::PromptOnly, &po_store),
            (Method::NoMeta, &nm_store),
            (Method::Full, &full.store),
        ];
        let table = run_protocol(&model, &ckpts, &pools, &protocol, seed).unwrap();

        let persistence: f64 = pools
            .iter()
            .filter(|p| p.split == Split::Train)
            .map(|p| persistence_baseline(&p.conformations))
            .sum::<f64>()
            / 3.0;
        println!("  persistence(train pools) {persistence:.5}");
        for m in [Method::PromptOnly, Method::NoMeta, Method::Full] {
            println!(
                "  {:<12} train {:.5} unseen {:.5} ood {:.5}",
                m.label(),
                table.set_mean(m, Split::Train).unwrap(),
                table.set_mean(m, Split::Unseen).unwrap(),
                table.set_mean(m, Split::Ood).unwrap()
            );
        }
        for m in [Method::NoMeta, Method::Full] {
            let mr = table.method(m).unwrap();
            let stds: Vec<String> = mr
                .temps
                .iter()
                .filter(|t| t.split == Split::Unseen)
                .map(|t| {
                    let mean = t.trial_mse.iter().sum::<f64>() / t.trial_mse.len() as f64;
                    let var = t
                        .trial_mse
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>()
                        / (t.trial_mse.len() - 1) as f64;
                    format!("T={}:{:.6}", t.temperature, var.sqrt())
                })
                .collect();
            println!("  {:<12} unseen stds {}", m.label(), stds.join(" "));
        }
        println!("  seed wall {:.1}s", t0.elapsed().as_secs_f64());
    }
}
