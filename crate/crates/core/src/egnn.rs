//! Equivariant graph convolution layers.
//!
//! Each layer updates invariant node features and equivariant coordinates
//! jointly:
//!
//!   m_ij = phi_e(h_i, h_j, ||x_i - x_j||^2)
//!   x'_i = x_i + (1/(N-1)) * sum_{j != i} (x_i - x_j) * phi_x(m_ij)
//!   h'_i = phi_h(h_i, sum_{j != i} m_ij)
//!
//! The coordinate head phi_x starts at zero so an untrained stack is the
//! identity on coordinates. Every MLP has two hidden layers of configurable
//! width; phi_e ends in an activation, phi_x and phi_h end linear.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::engine::graph::{Graph, TensorId};
use crate::engine::params::{Param, ParamStore, Partition, PartitionSet};
use crate::error::{Error, Result};

/// Directed edge list; pair (i, j) sends a message from j to receiver i.
#[derive(Debug, Clone)]
pub struct EdgeList {
    pairs: Vec<(usize, usize)>,
    receivers: Rc<Vec<usize>>,
    senders: Rc<Vec<usize>>,
}

impl EdgeList {
    pub fn new(pairs: Vec<(usize, usize)>, n: usize) -> Result<Self> {
        for &(i, j) in &pairs {
            if i == j {
                return Err(Error::Contract(format!("self edge ({i}, {j})")));
            }
            if i >= n || j >= n {
                return Err(Error::Contract(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
        }
        let receivers = Rc::new(pairs.iter().map(|&(i, _)| i).collect());
        let senders = Rc::new(pairs.iter().map(|&(_, j)| j).collect());
        Ok(EdgeList {
            pairs,
            receivers,
            senders,
        })
    }

    /// All N(N-1) ordered pairs.
    pub fn complete(n: usize) -> Self {
        let mut pairs = Vec::with_capacity(n.saturating_sub(1) * n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pairs.push((i, j));
                }
            }
        }
        EdgeList::new(pairs, n).expect("complete graph is always valid")
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub(crate) fn receivers(&self) -> Rc<Vec<usize>> {
        Rc::clone(&self.receivers)
    }

    pub(crate) fn senders(&self) -> Rc<Vec<usize>> {
        Rc::clone(&self.senders)
    }
}

/// Feature dimensions of one layer. The edge MLP input is 2 * in_dim + 1
/// (both endpoint features plus the squared distance).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EgclShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden: usize,
}

const MLP_NAMES: [&str; 3] = ["phi_e", "phi_x", "phi_h"];

fn mlp_dims(shape: &EgclShape, mlp: &str) -> [(usize, usize); 3] {
    let h = shape.hidden;
    match mlp {
        "phi_e" => [(2 * shape.in_dim + 1, h), (h, h), (h, h)],
        "phi_x" => [(h, h), (h, h), (h, 1)],
        "phi_h" => [(shape.in_dim + h, h), (h, h), (h, shape.out_dim)],
        _ => unreachable!(),
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight init.
pub(crate) fn init_linear(
    store: &mut ParamStore,
    name_w: String,
    name_b: String,
    fan_in: usize,
    fan_out: usize,
    partition: Partition,
    rng: &mut ChaCha12Rng,
    zero: bool,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = if zero {
        vec![0.0; fan_in * fan_out]
    } else {
        (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect()
    };
    let b: Vec<f64> = if zero {
        vec![0.0; fan_out]
    } else {
        (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect()
    };
    store.insert(name_w, Param::new(vec![fan_in, fan_out], w, partition));
    store.insert(name_b, Param::new(vec![fan_out], b, partition));
}

/// Create all parameters of one layer under `prefix`
/// (`{prefix}.{phi_e|phi_x|phi_h}.{w|b}{0..2}`). The final phi_x layer is
/// zero so the fresh layer leaves coordinates untouched.
pub fn init_egcl(
    store: &mut ParamStore,
    prefix: &str,
    shape: &EgclShape,
    partition: Partition,
    rng: &mut ChaCha12Rng,
) {
    for mlp in MLP_NAMES {
        for (k, (fan_in, fan_out)) in mlp_dims(shape, mlp).into_iter().enumerate() {
            let zero = mlp == "phi_x" && k == 2;
            init_linear(
                store,
                format!("{prefix}.{mlp}.w{k}"),
                format!("{prefix}.{mlp}.b{k}"),
                fan_in,
                fan_out,
                partition,
                rng,
                zero,
            );
        }
    }
}

/// Tensor ids of one layer's parameters bound into a graph.
pub struct BoundEgcl {
    mlps: [[(TensorId, TensorId); 3]; 3],
}

pub fn bind_egcl(
    g: &mut Graph,
    store: &ParamStore,
    live: PartitionSet,
    prefix: &str,
    shape: &EgclShape,
) -> Result<BoundEgcl> {
    let mut mlps = [[(TensorId(0), TensorId(0)); 3]; 3];
    for (mi, mlp) in MLP_NAMES.iter().enumerate() {
        let dims = mlp_dims(shape, mlp);
        for (k, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let wname = format!("{prefix}.{mlp}.w{k}");
            let bname = format!("{prefix}.{mlp}.b{k}");
            let wp = store.get(&wname)?;
            let bp = store.get(&bname)?;
            if wp.dims != vec![fan_in, fan_out] {
                return Err(Error::ShapeMismatch {
                    op: "bind_egcl",
                    left: wp.dims.clone(),
                    right: vec![fan_in, fan_out],
                });
            }
            let trainable = live.contains(wp.partition);
            let w = g.param(&wname, &wp.data, fan_in, fan_out, trainable);
            let b = g.param(&bname, &bp.data, 1, fan_out, live.contains(bp.partition));
            mlps[mi][k] = (w, b);
        }
    }
    Ok(BoundEgcl { mlps })
}

fn run_mlp(
    g: &mut Graph,
    layers: &[(TensorId, TensorId); 3],
    input: TensorId,
    final_act: bool,
) -> Result<TensorId> {
    let mut cur = input;
    for (k, &(w, b)) in layers.iter().enumerate() {
        let lin = g.matmul(cur, w)?;
        cur = g.add_row(lin, b)?;
        if k < 2 || final_act {
            cur = g.silu(cur);
        }
    }
    Ok(cur)
}

fn check_finite(g: &Graph, t: TensorId, what: &'static str) -> Result<()> {
    if g.value(t).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// One layer on graph tensors. `h` is N x in_dim, `x` is N x 3.
pub fn egcl_forward_graph(
    g: &mut Graph,
    layer: &BoundEgcl,
    shape: &EgclShape,
    h: TensorId,
    x: TensorId,
    edges: &EdgeList,
) -> Result<(TensorId, TensorId)> {
    let (n, _) = g.shape(h);
    check_finite(g, h, "egcl node features")?;
    check_finite(g, x, "egcl coordinates")?;

    if n <= 1 || edges.is_empty() {
        let zeros = g.zeros(n, shape.hidden);
        let hin = g.concat_cols(&[h, zeros])?;
        let h_out = run_mlp(g, &layer.mlps[2], hin, false)?;
        return Ok((h_out, x));
    }

    let recv = edges.receivers();
    let send = edges.senders();
    let hi = g.gather_rows(h, Rc::clone(&recv));
    let hj = g.gather_rows(h, Rc::clone(&send));
    let xi = g.gather_rows(x, Rc::clone(&recv));
    let xj = g.gather_rows(x, send);
    let diff = g.sub(xi, xj)?;
    let sq = g.mul(diff, diff)?;
    let d2 = g.sum_cols(sq);

    let edge_in = g.concat_cols(&[hi, hj, d2])?;
    let msg = run_mlp(g, &layer.mlps[0], edge_in, true)?;

    let coef = run_mlp(g, &layer.mlps[1], msg, false)?;
    let weighted = g.mul_col_broadcast(diff, coef)?;
    let agg_x = g.scatter_add_rows(weighted, Rc::clone(&recv), n);
    let x_out = g.axpby(1.0, x, 1.0 / (n as f64 - 1.0), agg_x)?;

    let agg_m = g.scatter_add_rows(msg, recv, n);
    let h_in = g.concat_cols(&[h, agg_m])?;
    let h_out = run_mlp(g, &layer.mlps[2], h_in, false)?;

    Ok((h_out, x_out))
}

/// Value-level convenience for a single layer stored under `prefix`.
pub fn egcl_forward(
    store: &ParamStore,
    prefix: &str,
    shape: &EgclShape,
    h: &[f64],
    x: &[f64],
    n: usize,
    edges: &EdgeList,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let h_id = g.constant(h.to_vec(), n, h.len() / n.max(1));
    let x_id = g.constant(x.to_vec(), n, 3);
    let bound = bind_egcl(&mut g, store, PartitionSet::NONE, prefix, shape)?;
    let (h_out, x_out) = egcl_forward_graph(&mut g, &bound, shape, h_id, x_id, edges)?;
    Ok((g.value(h_out).to_vec(), g.value(x_out).to_vec()))
}

/// Sequential composition over graph tensors.
pub fn egnn_stack_forward_graph(
    g: &mut Graph,
    store: &ParamStore,
    live: PartitionSet,
    layers: &[(String, EgclShape)],
    mut h: TensorId,
    mut x: TensorId,
    edges: &EdgeList,
) -> Result<(TensorId, TensorId)> {
    for (prefix, shape) in layers {
        let bound = bind_egcl(g, store, live, prefix, shape)?;
        let (h2, x2) = egcl_forward_graph(g, &bound, shape, h, x, edges)?;
        h = h2;
        x = x2;
    }
    Ok((h, x))
}

/// Value-level stack forward; an empty layer list is the identity.
pub fn egnn_stack_forward(
    store: &ParamStore,
    layers: &[(String, EgclShape)],
    h: &[f64],
    x: &[f64],
    n: usize,
    edges: &EdgeList,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let d = if n == 0 { 0 } else { h.len() / n };
    let mut h_id = g.constant(h.to_vec(), n, d);
    let mut x_id = g.constant(x.to_vec(), n, 3);
    for (prefix, shape) in layers {
        let bound = bind_egcl(&mut g, store, PartitionSet::NONE, prefix, shape)?;
        let (h2, x2) = egcl_forward_graph(&mut g, &bound, shape, h_id, x_id, edges)?;
        h_id = h2;
        x_id = x2;
    }
    Ok((g.value(h_id).to_vec(), g.value(x_id).to_vec()))
}

/// Sample a uniformly random rotation (det +1) by Gram-Schmidt on Gaussian
/// columns. Row-major 3x3.
pub fn random_rotation(rng: &mut ChaCha12Rng) -> [f64; 9] {
    use rand_distr::StandardNormal;
    loop {
        let mut cols = [[0.0f64; 3]; 3];
        for c in cols.iter_mut() {
            for v in c.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        // Orthonormalize columns.
        let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let n0 = norm(&cols[0]);
        if n0 < 1e-8 {
            continue;
        }
        for v in cols[0].iter_mut() {
            *v /= n0;
        }
        let d01: f64 = (0..3).map(|k| cols[0][k] * cols[1][k]).sum();
        for k in 0..3 {
            cols[1][k] -= d01 * cols[0][k];
        }
        let n1 = norm(&cols[1]);
        if n1 < 1e-8 {
            continue;
        }
        for v in cols[1].iter_mut() {
            *v /= n1;
        }
        // Third column: cross product guarantees right-handedness.
        cols[2] = [
            cols[0][1] * cols[1][2] - cols[0][2] * cols[1][1],
            cols[0][2] * cols[1][0] - cols[0][0] * cols[1][2],
            cols[0][0] * cols[1][1] - cols[0][1] * cols[1][0],
        ];
        let mut r = [0.0f64; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = cols[col][row];
            }
        }
        return r;
    }
}

/// y = R x + t applied to every row of an N x 3 coordinate block.
pub fn apply_rigid(x: &[f64], r: &[f64; 9], t: &[f64; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for p in x.chunks(3) {
        for row in 0..3 {
            out.push(r[row * 3] * p[0] + r[row * 3 + 1] * p[1] + r[row * 3 + 2] * p[2] + t[row]);
        }
    }
    out
}

/// Max deviation of `f` from exact equivariance over random rigid motions:
/// max over trials of || f(h, Rx + t) - (R f(h, x) + t) ||_inf.
pub fn equivariance_probe<F>(f: F, h: &[f64], x: &[f64], trials: usize, seed: u64) -> f64
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let base = f(h, x);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let r = random_rotation(&mut rng);
        let t = [
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ];
        let moved = apply_rigid(x, &r, &t);
        let out_moved = f(h, &moved);
        let expected = apply_rigid(&base, &r, &t);
        for (a, b) in out_moved.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
