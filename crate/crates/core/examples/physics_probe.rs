// Scratch physics probe (not shipped): reducible fraction and the
// temperature-dependence of the conditional-mean map for candidate chains.
use promptmd_core::mdgen::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// From equilibrium states at t_state, measure (aligned per-atom):
/// persistence, conditional variance floor, and the squared distance between
/// conditional means under dynamics at the listed temperatures.
fn t_shift_probe(
    spec: &ChainSpec,
    sim: &SimConfig,
    t_state: f64,
    t_pair: (f64, f64),
    n_states: usize,
    twins: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let mut state = init_chain(spec, t_state, sim.dt, sim.friction, seed);
    for _ in 0..60_000 {
        langevin_step(spec, &mut state).unwrap();
    }
    let n = spec.n_beads;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut persist = 0.0;
    let mut cond = 0.0;
    let mut shift = 0.0;
    for _ in 0..n_states {
        for _ in 0..sim.stride {
            langevin_step(spec, &mut state).unwrap();
        }
        let mut x0 = state.positions.clone();
        center_frame(&mut x0);
        let mut means: Vec<Vec<f64>> = Vec::new();
        for &td in [t_pair.0, t_pair.1].iter() {
            let sigma = (td / spec.mass).sqrt();
            let mut acc = vec![0.0; 3 * n];
            let mut endpoints: Vec<Vec<f64>> = Vec::with_capacity(twins);
            for _ in 0..twins {
                let velocities: Vec<f64> = (0..3 * n)
                    .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut tw = SimState::from_phase(
                    spec,
                    state.positions.clone(),
                    velocities,
                    td,
                    sim.dt,
                    sim.friction,
                    rng.random(),
                );
                for _ in 0..sim.stride {
                    langevin_step(spec, &mut tw).unwrap();
                }
                let mut frame = tw.positions.clone();
                center_frame(&mut frame);
                align_frame(&x0, &mut frame);
                for (a, v) in acc.iter_mut().zip(&frame) {
                    *a += v;
                }
                endpoints.push(frame);
            }
            for a in acc.iter_mut() {
                *a /= twins as f64;
            }
            if means.is_empty() {
                for e in &endpoints {
                    persist += e.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                        / (twins * n) as f64;
                    cond += e.iter().zip(&acc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                        / (twins * n) as f64;
                }
            }
            means.push(acc);
        }
        shift += means[0]
            .iter()
            .zip(&means[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
    }
    (
        persist / n_states as f64,
        cond / n_states as f64,
        shift / n_states as f64,
    )
}

fn main() {
    let candidates = vec![
        (
            "C5 softer k4",
            ChainSpec { n_beads: 10, bond_k: 100.0, bond_r0: 1.0, angle_k: 4.0, repulsion: 2.0, mass: 1.0 },
            SimConfig { dt: 0.01, friction: 0.5, stride: 500, train_frames: 2000, test_frames: 600 },
        ),
        (
            "C6 low friction",
            ChainSpec { n_beads: 10, bond_k: 100.0, bond_r0: 1.0, angle_k: 6.0, repulsion: 2.0, mass: 1.0 },
            SimConfig { dt: 0.01, friction: 0.35, stride: 560, train_frames: 2000, test_frames: 600 },
        ),
        (
            "C7 strong rep long",
            ChainSpec { n_beads: 10, bond_k: 100.0, bond_r0: 1.0, angle_k: 8.0, repulsion: 3.0, mass: 1.0 },
            SimConfig { dt: 0.01, friction: 0.5, stride: 600, train_frames: 2000, test_frames: 600 },
        ),
        (
            "C8 c2 longer tau",
            ChainSpec { n_beads: 10, bond_k: 100.0, bond_r0: 1.0, angle_k: 6.0, repulsion: 2.0, mass: 1.0 },
            SimConfig { dt: 0.01, friction: 0.5, stride: 800, train_frames: 2000, test_frames: 600 },
        ),
    ];
    for (name, spec, sim) in candidates {
        print!("{name}: ");
        let mut ok = true;
        for t in [0.8, 1.5] {
            match reducibility_probe(&spec, &sim, t, 200, 9) {
                Ok((p, _c, f)) => print!("T={t}: persist {p:.4} frac {f:.2}  "),
                Err(e) => {
                    print!("T={t}: FAILED {e}  ");
                    ok = false;
                }
            }
        }
        if !ok {
            println!();
            continue;
        }
        let twins = 48;
        let (persist, cond, shift) = t_shift_probe(&spec, &sim, 1.0, (0.8, 1.5), 80, twins, 33);
        let noise_floor = 2.0 * cond / twins as f64;
        let true_shift = (shift - noise_floor).max(0.0);
        println!(
            "aligned persist {persist:.4} cond {cond:.4} | T-shift raw {shift:.4} floor {noise_floor:.4} true {true_shift:.4} ({:.1}% of persistence, {:.1}% of reducible)",
            100.0 * true_shift / persist,
            100.0 * true_shift / (persist - cond).max(1e-12),
        );
    }
}
