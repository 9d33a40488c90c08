//! Backbone assembly: prompt encoder, prompt-agnostic structure encoder,
//! predictor stack, and the two mixing networks, plus every loss path used in
//! training.
//!
//! Parameter naming: `prompt_enc.*` (PROMPT), `struct_enc.*` and
//! `predictor.*` (BACKBONE), `promptmix.*` (PROMPTMIX), `structmix.*`
//! (STRUCTMIX). Predictor/encoder layers follow the
//! `{prefix}.layer{i}.{phi_e|phi_x|phi_h}.{w|b}{j}` convention.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::egnn::{bind_egcl, egcl_forward_graph, init_egcl, init_linear, EdgeList, EgclShape};
use crate::engine::graph::{GradMap, Graph, TensorId};
use crate::engine::params::{Param, ParamStore, Partition, PartitionSet};
use crate::error::{Error, Result};

/// One training sample: positions, per-bead identity indices (embedded by the
/// model), the next-frame ground truth, and the temperature tag.
#[derive(Debug, Clone)]
pub struct Conformation {
    pub positions: Vec<f64>,
    pub bead_ids: Vec<usize>,
    pub target: Vec<f64>,
    pub temperature: f64,
}

impl Conformation {
    pub fn n(&self) -> usize {
        self.bead_ids.len()
    }
}

/// Pool entry used for mixed-sample pairing: invariant structure features,
/// encoder coordinates and ground truth of one sample, frozen at pool-fill
/// time.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub temperature: f64,
    pub features: Vec<f64>,
    pub x_enc: Vec<f64>,
    pub x_gt: Vec<f64>,
    pub source: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    /// Number of distinct bead identities (= beads in the chain).
    pub n_bead_types: usize,
    /// Bead embedding width fed to the structure encoder.
    pub d_h: usize,
    /// Structure feature width produced by the encoder.
    pub d_s: usize,
    /// Prompt vector width.
    pub d_p: usize,
    /// Hidden width of the EGCL MLPs.
    pub hidden: usize,
    /// Hidden width of the prompt encoder MLP.
    pub prompt_hidden: usize,
    /// EGCL layers in the predictor stack.
    pub predictor_layers: usize,
    /// Multiplier on the prompt encoder's weight initialization. Values
    /// above one start distinct temperatures well separated in prompt
    /// space, which the mixing curriculum then smooths.
    pub prompt_init_gain: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            n_bead_types: 10,
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

impl ModelDims {
    pub fn encoder_shape(&self) -> EgclShape {
        EgclShape {
            in_dim: self.d_h,
            out_dim: self.d_s,
            hidden: self.hidden,
        }
    }

    pub fn predictor_shape(&self) -> EgclShape {
        let w = self.d_s + self.d_p;
        EgclShape {
            in_dim: w,
            out_dim: w,
            hidden: self.hidden,
        }
    }
}

/// Initialize all four partitions. Mixing networks start as the exact convex
/// interpolation map (their affine residual is zero), so mixed samples are
/// meaningful from the first curriculum epoch.
pub fn init_model_params(dims: &ModelDims, seed: u64) -> ParamStore {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    // Prompt encoder: scalar temperature -> d_p, two hidden layers, scaled
    // by the configured gain.
    let ph = dims.prompt_hidden;
    for (k, (fan_in, fan_out)) in [(1, ph), (ph, ph), (ph, dims.d_p)].into_iter().enumerate() {
        init_linear(
            &mut store,
            format!("prompt_enc.w{k}"),
            format!("prompt_enc.b{k}"),
            fan_in,
            fan_out,
            Partition::Prompt,
            &mut rng,
            false,
        );
        if dims.prompt_init_gain != 1.0 {
            for suffix in ["w", "b"] {
                let p = store.get_mut(&format!("prompt_enc.{suffix}{k}")).unwrap();
                for v in p.data.iter_mut() {
                    *v *= dims.prompt_init_gain;
                }
            }
        }
    }

    // Bead-identity embedding table.
    let embed: Vec<f64> = (0..dims.n_bead_types * dims.d_h)
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    store.insert(
        "struct_enc.embed",
        Param::new(
            vec![dims.n_bead_types, dims.d_h],
            embed,
            Partition::Backbone,
        ),
    );

    // Structure encoder: a single layer.
    init_egcl(
        &mut store,
        "struct_enc.layer0",
        &dims.encoder_shape(),
        Partition::Backbone,
        &mut rng,
    );

    // Predictor stack.
    let pshape = dims.predictor_shape();
    for l in 0..dims.predictor_layers {
        init_egcl(
            &mut store,
            &format!("predictor.layer{l}"),
            &pshape,
            Partition::Backbone,
            &mut rng,
        );
    }

    // Mixing networks: single affine maps on [a, b, lambda], zero so the
    // initial mixers realize exact interpolation.
    store.insert(
        "promptmix.w",
        Param::new(
            vec![2 * dims.d_p + 1, dims.d_p],
            vec![0.0; (2 * dims.d_p + 1) * dims.d_p],
            Partition::PromptMix,
        ),
    );
    store.insert(
        "promptmix.b",
        Param::new(vec![dims.d_p], vec![0.0; dims.d_p], Partition::PromptMix),
    );
    store.insert(
        "structmix.w",
        Param::new(
            vec![2 * dims.d_s + 1, dims.d_s],
            vec![0.0; (2 * dims.d_s + 1) * dims.d_s],
            Partition::StructMix,
        ),
    );
    store.insert(
        "structmix.b",
        Param::new(vec![dims.d_s], vec![0.0; dims.d_s], Partition::StructMix),
    );

    store
}

/// Model outputs for one mixed sample.
pub struct MixedForward {
    pub prediction: TensorId,
    pub target: Vec<f64>,
}

/// Which side of the alternating mixed objective a graph is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixPass {
    /// Gradients flow into the backbone partitions; mixer weights are frozen.
    Backbone,
    /// Gradients flow into the mixer partitions; backbone outputs detached.
    Mixers,
}

/// Stateless view over the parameter store; all methods build onto a caller
/// provided graph so several loss paths can share parameter bindings.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateModel {
    pub dims: ModelDims,
}

impl SurrogateModel {
    pub fn new(dims: ModelDims) -> Self {
        SurrogateModel { dims }
    }

    fn bind_linear(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        live: PartitionSet,
        name: &str,
    ) -> Result<TensorId> {
        let p = store.get(name)?;
        let (rows, cols) = p.matrix_shape();
        Ok(g.param(name, &p.data, rows, cols, live.contains(p.partition)))
    }

    /// Deterministic prompt vector for a temperature, shape 1 x d_p.
    pub fn encode_prompt_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        live: PartitionSet,
        temperature: f64,
    ) -> Result<TensorId> {
        if !(temperature > 0.0) {
            return Err(Error::Contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let t = g.constant(vec![temperature], 1, 1);
        let mut cur = t;
        for (k, act) in [(0, true), (1, true), (2, false)] {
            let w = self.bind_linear(g, store, live, &format!("prompt_enc.w{k}"))?;
            let b = self.bind_linear(g, store, live, &format!("prompt_enc.b{k}"))?;
            let lin = g.matmul(cur, w)?;
            cur = g.add_row(lin, b)?;
            if act {
                cur = g.silu(cur);
            }
        }
        Ok(cur)
    }

    pub fn encode_prompt(&self, store: &ParamStore, temperature: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.encode_prompt_graph(&mut g, store, PartitionSet::NONE, temperature)?;
        Ok(g.value(p).to_vec())
    }

    /// Invariant per-node structure features and the encoder-updated
    /// coordinates. Temperature never enters here.
    pub fn encode_structure_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        live: PartitionSet,
        conf: &Conformation,
    ) -> Result<(TensorId, TensorId)> {
        let n = conf.n();
        let embed = self.bind_linear(g, store, live, "struct_enc.embed")?;
        let ids = std::rc::Rc::new(conf.bead_ids.clone());
        let h = g.gather_rows(embed, ids);
        let x = g.constant(conf.positions.clone(), n, 3);
        let edges = EdgeList::complete(n);
        let bound = bind_egcl(g, store, live, "struct_enc.layer0", &self.dims.encoder_shape())?;
        egcl_forward_graph(g, &bound, &self.dims.encoder_shape(), h, x, &edges)
    }

    pub fn encode_structure(
        &self,
        store: &ParamStore,
        conf: &Conformation,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let (s, xe) = self.encode_structure_graph(&mut g, store, PartitionSet::NONE, conf)?;
        Ok((g.value(s).to_vec(), g.value(xe).to_vec()))
    }

    /// Runs the predictor stack on per-node features and coordinates.
    fn predictor_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        live: PartitionSet,
        feats: TensorId,
        x: TensorId,
        edges: &EdgeList,
    ) -> Result<TensorId> {
        let shape = self.dims.predictor_shape();
        let mut h = feats;
        let mut coords = x;
        for l in 0..self.dims.predictor_layers {
            let bound = bind_egcl(g, store, live, &format!("predictor.layer{l}"), &shape)?;
            let (h2, x2) = egcl_forward_graph(g, &bound, &shape, h, coords, edges)?;
            h = h2;
            coords = x2;
        }
        Ok(coords)
    }

    /// Full forward pass: next-step coordinates for one conformation.
    pub fn predict_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        live: PartitionSet,
        conf: &Conformation,
    ) -> Result<TensorId> {
        let n = conf.n();
        let prompt = self.encode_prompt_graph(g, store, live, conf.temperature)?;
        let (s, x_enc) = self.encode_structure_graph(g, store, live, conf)?;
        let prompt_rows = g.repeat_row(prompt, n);
        let feats = g.concat_cols(&[s, prompt_rows])?;
        let edges = EdgeList::complete(n);
        self.predictor_graph(g, store, live, feats, x_enc, &edges)
    }

    pub fn predict(&self, store: &ParamStore, conf: &Conformation) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let pred = self.predict_graph(&mut g, store, PartitionSet::NONE, conf)?;
        Ok(g.value(pred).to_vec())
    }

    /// Mixed prompt: exact interpolation plus a learnable affine residual on
    /// [p1, p2, lambda].
    pub fn prompt_mix_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        live: PartitionSet,
        p1: TensorId,
        p2: TensorId,
        lambda: f64,
    ) -> Result<TensorId> {
        check_lambda(lambda)?;
        let interp = g.axpby(1.0 - lambda, p1, lambda, p2)?;
        let lam = g.constant(vec![lambda], 1, 1);
        let joint = g.concat_cols(&[p1, p2, lam])?;
        let w = self.bind_linear(g, store, live, "promptmix.w")?;
        let b = self.bind_linear(g, store, live, "promptmix.b")?;
        let lin = g.matmul(joint, w)?;
        let residual = g.add_row(lin, b)?;
        g.add(interp, residual)
    }

    /// Mixed structure features, applied per node.
    pub fn struct_mix_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        live: PartitionSet,
        s1: TensorId,
        s2: TensorId,
        lambda: f64,
    ) -> Result<TensorId> {
        check_lambda(lambda)?;
        let (n1, _) = g.shape(s1);
        let (n2, _) = g.shape(s2);
        if n1 != n2 {
            return Err(Error::ShapeMismatch {
                op: "struct_mix",
                left: vec![n1],
                right: vec![n2],
            });
        }
        let interp = g.axpby(1.0 - lambda, s1, lambda, s2)?;
        let lam_col = g.constant(vec![lambda; n1], n1, 1);
        let joint = g.concat_cols(&[s1, s2, lam_col])?;
        let w = self.bind_linear(g, store, live, "structmix.w")?;
        let b = self.bind_linear(g, store, live, "structmix.b")?;
        let lin = g.matmul(joint, w)?;
        let residual = g.add_row(lin, b)?;
        g.add(interp, residual)
    }

    /// Forward pass of one mixed sample paired from a different temperature's
    /// pool. In the mixer pass, backbone outputs are detached so gradients
    /// reach only the mixing networks; in the backbone pass the mixer weights
    /// are bound frozen and gradients flow through the mixing map into the
    /// encoders and predictor. `learned_struct_mix = false` replaces the
    /// structure mixer with the fixed interpolation (meta stage).
    pub fn mixed_forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        live: PartitionSet,
        pass: MixPass,
        conf: &Conformation,
        paired: &PoolEntry,
        lambda: f64,
        learned_struct_mix: bool,
    ) -> Result<MixedForward> {
        check_lambda(lambda)?;
        if paired.temperature == conf.temperature {
            return Err(Error::SameTemperaturePair(conf.temperature));
        }
        let n = conf.n();

        let p1 = self.encode_prompt_graph(g, store, live, conf.temperature)?;
        let p2 = self.encode_prompt_graph(g, store, live, paired.temperature)?;
        let (s1, x_enc1) = self.encode_structure_graph(g, store, live, conf)?;
        let (p1, p2, s1, x_enc1) = match pass {
            MixPass::Backbone => (p1, p2, s1, x_enc1),
            MixPass::Mixers => (
                g.detach(p1),
                g.detach(p2),
                g.detach(s1),
                g.detach(x_enc1),
            ),
        };

        let s2 = g.constant(paired.features.clone(), n, self.dims.d_s);
        let x_enc2 = g.constant(paired.x_enc.clone(), n, 3);

        let p_m = self.prompt_mix_graph(g, store, live, p1, p2, lambda)?;
        let s_m = if learned_struct_mix {
            self.struct_mix_graph(g, store, live, s1, s2, lambda)?
        } else {
            g.axpby(1.0 - lambda, s1, lambda, s2)?
        };
        let x_m = g.axpby(1.0 - lambda, x_enc1, lambda, x_enc2)?;

        let prompt_rows = g.repeat_row(p_m, n);
        let feats = g.concat_cols(&[s_m, prompt_rows])?;
        let edges = EdgeList::complete(n);
        let prediction = self.predictor_graph(g, store, live, feats, x_m, &edges)?;

        let target: Vec<f64> = conf
            .target
            .iter()
            .zip(&paired.x_gt)
            .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
            .collect();

        Ok(MixedForward { prediction, target })
    }

    /// Supervised loss on one real sample; returns the value and gradients of
    /// the partitions in `live`.
    pub fn real_loss_backward(
        &self,
        store: &ParamStore,
        live: PartitionSet,
        conf: &Conformation,
    ) -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let pred = self.predict_graph(&mut g, store, live, conf)?;
        let target = g.constant(conf.target.clone(), conf.n(), 3);
        let loss = g.mse(pred, target)?;
        g.backward(loss)?;
        Ok((g.scalar_value(loss), g.grads_by_name()))
    }

    /// Mixed-sample loss; gradient routing picked by `pass`.
    pub fn mixed_loss_backward(
        &self,
        store: &ParamStore,
        live: PartitionSet,
        pass: MixPass,
        conf: &Conformation,
        paired: &PoolEntry,
        lambda: f64,
        learned_struct_mix: bool,
    ) -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let mixed = self.mixed_forward_graph(
            &mut g,
            store,
            live,
            pass,
            conf,
            paired,
            lambda,
            learned_struct_mix,
        )?;
        let target = g.constant(mixed.target.clone(), conf.n(), 3);
        let loss = g.mse(mixed.prediction, target)?;
        g.backward(loss)?;
        Ok((g.scalar_value(loss), g.grads_by_name()))
    }

    /// All three loss components of the first-stage objective for a batch and
    /// a (possibly empty) set of prepared mixed samples. The two mixed terms
    /// share one forward computation per sample, so they are equal in value
    /// and differ only in gradient routing.
    pub fn stage1_losses(
        &self,
        store: &ParamStore,
        batch: &[Conformation],
        mixed: &[(Conformation, PoolEntry, f64)],
    ) -> Result<(f64, f64, f64)> {
        let mut real = 0.0;
        for conf in batch {
            let mut g = Graph::new();
            let pred = self.predict_graph(&mut g, store, PartitionSet::NONE, conf)?;
            let target = g.constant(conf.target.clone(), conf.n(), 3);
            let loss = g.mse(pred, target)?;
            real += g.scalar_value(loss);
        }
        if !batch.is_empty() {
            real /= batch.len() as f64;
        }
        let mut mixed_value = 0.0;
        for (conf, entry, lambda) in mixed {
            let mut g = Graph::new();
            let fwd = self.mixed_forward_graph(
                &mut g,
                store,
                PartitionSet::NONE,
                MixPass::Backbone,
                conf,
                entry,
                *lambda,
                true,
            )?;
            let target = g.constant(fwd.target.clone(), conf.n(), 3);
            let loss = g.mse(fwd.prediction, target)?;
            mixed_value += g.scalar_value(loss);
        }
        if !mixed.is_empty() {
            mixed_value /= mixed.len() as f64;
        }
        Ok((real, mixed_value, mixed_value))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!(
            "mixing ratio must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// Fresh models have zero coordinate heads (identity on coordinates), which
/// also zeroes every prompt/mixer gradient. Tests that exercise those paths
/// from an untrained store kick the heads off the saddle first.
#[cfg(test)]
pub(crate) fn randomize_coordinate_heads(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let names: Vec<String> = store
        .iter()
        .filter(|(n, _)| n.contains("phi_x.w2") || n.contains("phi_x.b2"))
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        for v in store.get_mut(&name).unwrap().data.iter_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
}
