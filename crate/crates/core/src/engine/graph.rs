//! Tape-based reverse-mode differentiation over dense f64 matrices.
//!
//! A [`Graph`] records every operation applied while building a loss; calling
//! [`Graph::backward`] on a scalar node fills in gradients for every leaf that
//! was created with `requires_grad`. There is no higher-order differentiation:
//! the tape holds plain values, and `backward` consumes it once.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// alpha * a + beta * b, elementwise.
    AxpBy {
        a: TensorId,
        b: TensorId,
        alpha: f64,
        beta: f64,
    },
    Scale(TensorId, f64),
    MatMul(TensorId, TensorId),
    /// Matrix plus a row vector broadcast over every row.
    AddRow(TensorId, TensorId),
    Silu(TensorId),
    GatherRows(TensorId, Rc<Vec<usize>>),
    ScatterAddRows(TensorId, Rc<Vec<usize>>),
    ConcatCols(Vec<TensorId>),
    SumCols(TensorId),
    /// a[m,n] * s[m,1], the column vector broadcast across columns.
    MulColBroadcast(TensorId, TensorId),
    RepeatRow(TensorId),
    Mse(TensorId, TensorId),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    name: Option<String>,
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    inner: BTreeMap<String, Vec<f64>>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.inner.get(name).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, name: String, grad: Vec<f64>) {
        self.inner.insert(name, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.inner.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    /// Elementwise add another gradient map (used for batch accumulation).
    pub fn accumulate(&mut self, other: &GradMap) {
        for (name, g) in other.inner.iter() {
            match self.inner.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
                None => {
                    self.inner.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.inner.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Max-norm over every stored gradient.
    pub fn max_abs(&self) -> f64 {
        self.inner
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// The tape. Nodes are append-only, so ids created earlier never reference
/// later nodes and a single reverse sweep is a valid topological order.
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, TensorId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(128),
            bound: HashMap::new(),
        }
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            requires_grad,
            op,
            name: None,
        });
        id
    }

    /// A constant leaf: participates in forward only.
    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> TensorId {
        self.push(rows, cols, data, false, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.constant(vec![value], 1, 1)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> TensorId {
        self.constant(vec![0.0; rows * cols], rows, cols)
    }

    /// A differentiable leaf without a name (inputs under test, probes).
    pub fn variable(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> TensorId {
        self.push(rows, cols, data, true, Op::Leaf)
    }

    /// Bind a named parameter. Binding the same name twice returns the first
    /// node so that shared parameters accumulate gradients naturally.
    pub fn param(
        &mut self,
        name: &str,
        data: &[f64],
        rows: usize,
        cols: usize,
        trainable: bool,
    ) -> TensorId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = self.push(rows, cols, data.to_vec(), trainable, Op::Leaf);
        self.nodes[id.0].name = Some(name.to_string());
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Value-equal copy with no operation record: backward stops here.
    pub fn detach(&mut self, t: TensorId) -> TensorId {
        let (rows, cols) = self.shape(t);
        let data = self.nodes[t.0].data.clone();
        self.push(rows, cols, data, false, Op::Leaf)
    }

    pub fn shape(&self, t: TensorId) -> (usize, usize) {
        let n = &self.nodes[t.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn scalar_value(&self, t: TensorId) -> f64 {
        self.nodes[t.0].data[0]
    }

    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br || ac != bc {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![ar, ac],
                right: vec![br, bc],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(r, c, data, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(r, c, data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(r, c, data, rg, Op::Mul(a, b)))
    }

    /// alpha * a + beta * b with runtime-constant coefficients.
    pub fn axpby(&mut self, alpha: f64, a: TensorId, beta: f64, b: TensorId) -> Result<TensorId> {
        self.same_shape("axpby", a, b)?;
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(r, c, data, rg, Op::AxpBy { a, b, alpha, beta }))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * factor).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(r, c, data, rg, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(
            &mut out,
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
        );
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(m, n, out, rg, Op::MatMul(a, b)))
    }

    /// `a` is m x n, `bias` is 1 x n; the bias row is added to every row.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: vec![br, bc],
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[bias.0].requires_grad;
        Ok(self.push(m, n, data, rg, Op::AddRow(a, bias)))
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(r, c, data, rg, Op::Silu(a))
    }

    pub fn gather_rows(&mut self, a: TensorId, idx: Rc<Vec<usize>>) -> TensorId {
        let (_, n) = self.shape(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(&self.nodes[a.0].data[i * n..(i + 1) * n]);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(idx.len(), n, data, rg, Op::GatherRows(a, idx))
    }

    /// Scatter-add the rows of `a` (one per index) into `rows` output rows.
    pub fn scatter_add_rows(&mut self, a: TensorId, idx: Rc<Vec<usize>>, rows: usize) -> TensorId {
        let (e, n) = self.shape(a);
        debug_assert_eq!(e, idx.len());
        let mut data = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            let src = &self.nodes[a.0].data[r * n..(r + 1) * n];
            let dst = &mut data[i * n..(i + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(rows, n, data, rg, Op::ScatterAddRows(a, idx))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let m = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![m, 0],
                    right: vec![r, c],
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for row in 0..m {
            for &p in parts {
                let c = self.shape(p).1;
                data.extend_from_slice(&self.nodes[p.0].data[row * c..(row + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        Ok(self.push(m, total, data, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum_cols(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .chunks(n)
            .map(|row| row.iter().sum())
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(m, 1, data, rg, Op::SumCols(a))
    }

    /// a[m,n] * s[m,1] with s broadcast along columns.
    pub fn mul_col_broadcast(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let (sr, sc) = self.shape(s);
        if sr != m || sc != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_col_broadcast",
                left: vec![m, n],
                right: vec![sr, sc],
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for (row, &sv) in data.chunks_mut(n).zip(&self.nodes[s.0].data) {
            for v in row.iter_mut() {
                *v *= sv;
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[s.0].requires_grad;
        Ok(self.push(m, n, data, rg, Op::MulColBroadcast(a, s)))
    }

    /// Broadcast a 1 x n row to `rows` identical rows.
    pub fn repeat_row(&mut self, a: TensorId, rows: usize) -> TensorId {
        let (_, n) = self.shape(a);
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].data);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(rows, n, data, rg, Op::RepeatRow(a))
    }

    /// Mean over rows of the squared row-difference norms:
    /// (1/m) * sum_i ||a_i - b_i||^2. Scalar output.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.same_shape("mse", pred, target)?;
        let (m, _) = self.shape(pred);
        let sum: f64 = self.nodes[pred.0]
            .data
            .iter()
            .zip(&self.nodes[target.0].data)
            .map(|(p, t)| {
                let d = p - t;
                d * d
            })
            .sum();
        let value = sum / m as f64;
        let rg = self.nodes[pred.0].requires_grad || self.nodes[target.0].requires_grad;
        Ok(self.push(1, 1, vec![value], rg, Op::Mse(pred, target)))
    }

    fn ensure_grad(&mut self, t: TensorId) {
        if self.nodes[t.0].grad.is_none() {
            let len = self.nodes[t.0].data.len();
            self.nodes[t.0].grad = Some(vec![0.0; len]);
        }
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// requires-grad node reachable from `loss`; everything else stays absent.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if r != 1 || c != 1 {
            return Err(Error::Contract(format!(
                "backward expects a scalar loss, got shape {r}x{c}"
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    self.accumulate_scaled(a, &g, 1.0);
                    self.accumulate_scaled(b, &g, 1.0);
                    self.nodes[id].grad = Some(g);
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    self.accumulate_scaled(a, &g, 1.0);
                    self.accumulate_scaled(b, &g, -1.0);
                    self.nodes[id].grad = Some(g);
                }
                Op::AxpBy { a, b, alpha, beta } => {
                    let g = self.nodes[id].grad.take().unwrap();
                    self.accumulate_scaled(a, &g, alpha);
                    self.accumulate_scaled(b, &g, beta);
                    self.nodes[id].grad = Some(g);
                }
                Op::Scale(a, f) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    self.accumulate_scaled(a, &g, f);
                    self.nodes[id].grad = Some(g);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    if self.nodes[a.0].requires_grad {
                        self.ensure_grad(a);
                        let bdata = std::mem::take(&mut self.nodes[b.0].data);
                        {
                            let ga = self.nodes[a.0].grad.as_mut().unwrap();
                            for ((gv, bv), acc) in g.iter().zip(&bdata).zip(ga.iter_mut()) {
                                *acc += gv * bv;
                            }
                        }
                        self.nodes[b.0].data = bdata;
                    }
                    if self.nodes[b.0].requires_grad {
                        self.ensure_grad(b);
                        let adata = std::mem::take(&mut self.nodes[a.0].data);
                        {
                            let gb = self.nodes[b.0].grad.as_mut().unwrap();
                            for ((gv, av), acc) in g.iter().zip(&adata).zip(gb.iter_mut()) {
                                *acc += gv * av;
                            }
                        }
                        self.nodes[a.0].data = adata;
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::MatMul(a, b) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    let (m, k) = self.shape(a);
                    let n = self.shape(b).1;
                    if self.nodes[a.0].requires_grad {
                        // dA += dC . B^T
                        self.ensure_grad(a);
                        let bdata = std::mem::take(&mut self.nodes[b.0].data);
                        {
                            let ga = self.nodes[a.0].grad.as_mut().unwrap();
                            matmul_nt_acc(ga, &g, &bdata, m, n, k);
                        }
                        self.nodes[b.0].data = bdata;
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB += A^T . dC
                        self.ensure_grad(b);
                        let adata = std::mem::take(&mut self.nodes[a.0].data);
                        {
                            let gb = self.nodes[b.0].grad.as_mut().unwrap();
                            matmul_tn_acc(gb, &adata, &g, m, k, n);
                        }
                        self.nodes[a.0].data = adata;
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::AddRow(a, bias) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    let n = self.shape(bias).1;
                    self.accumulate_scaled(a, &g, 1.0);
                    if self.nodes[bias.0].requires_grad {
                        self.ensure_grad(bias);
                        let gb = self.nodes[bias.0].grad.as_mut().unwrap();
                        for row in g.chunks(n) {
                            for (acc, gv) in gb.iter_mut().zip(row) {
                                *acc += gv;
                            }
                        }
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::Silu(a) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    if self.nodes[a.0].requires_grad {
                        self.ensure_grad(a);
                        let adata = std::mem::take(&mut self.nodes[a.0].data);
                        {
                            let ga = self.nodes[a.0].grad.as_mut().unwrap();
                            for ((gv, &x), acc) in g.iter().zip(&adata).zip(ga.iter_mut()) {
                                let s = sigmoid(x);
                                *acc += gv * (s + x * s * (1.0 - s));
                            }
                        }
                        self.nodes[a.0].data = adata;
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::GatherRows(a, idx) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    if self.nodes[a.0].requires_grad {
                        self.ensure_grad(a);
                        let n = self.shape(a).1;
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for (r, &i) in idx.iter().enumerate() {
                            let src = &g[r * n..(r + 1) * n];
                            let dst = &mut ga[i * n..(i + 1) * n];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::ScatterAddRows(a, idx) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    if self.nodes[a.0].requires_grad {
                        self.ensure_grad(a);
                        let n = self.shape(a).1;
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for (r, &i) in idx.iter().enumerate() {
                            let src = &g[i * n..(i + 1) * n];
                            let dst = &mut ga[r * n..(r + 1) * n];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::ConcatCols(parts) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    let total = self.shape(TensorId(id)).1;
                    let m = self.shape(TensorId(id)).0;
                    let mut offset = 0;
                    for &p in &parts {
                        let c = self.shape(p).1;
                        if self.nodes[p.0].requires_grad {
                            self.ensure_grad(p);
                            let gp = self.nodes[p.0].grad.as_mut().unwrap();
                            for row in 0..m {
                                let src = &g[row * total + offset..row * total + offset + c];
                                let dst = &mut gp[row * c..(row + 1) * c];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        offset += c;
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::SumCols(a) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    if self.nodes[a.0].requires_grad {
                        self.ensure_grad(a);
                        let n = self.shape(a).1;
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for (row, &gv) in ga.chunks_mut(n).zip(&g) {
                            for v in row.iter_mut() {
                                *v += gv;
                            }
                        }
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::MulColBroadcast(a, s) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    let n = self.shape(a).1;
                    if self.nodes[a.0].requires_grad {
                        self.ensure_grad(a);
                        let sdata = std::mem::take(&mut self.nodes[s.0].data);
                        {
                            let ga = self.nodes[a.0].grad.as_mut().unwrap();
                            for ((grow, arow), &sv) in
                                g.chunks(n).zip(ga.chunks_mut(n)).zip(&sdata)
                            {
                                for (acc, gv) in arow.iter_mut().zip(grow) {
                                    *acc += gv * sv;
                                }
                            }
                        }
                        self.nodes[s.0].data = sdata;
                    }
                    if self.nodes[s.0].requires_grad {
                        self.ensure_grad(s);
                        let adata = std::mem::take(&mut self.nodes[a.0].data);
                        {
                            let gs = self.nodes[s.0].grad.as_mut().unwrap();
                            for ((grow, arow), acc) in
                                g.chunks(n).zip(adata.chunks(n)).zip(gs.iter_mut())
                            {
                                *acc += grow.iter().zip(arow).map(|(gv, av)| gv * av).sum::<f64>();
                            }
                        }
                        self.nodes[a.0].data = adata;
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::RepeatRow(a) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    if self.nodes[a.0].requires_grad {
                        self.ensure_grad(a);
                        let n = self.shape(a).1;
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for row in g.chunks(n) {
                            for (acc, gv) in ga.iter_mut().zip(row) {
                                *acc += gv;
                            }
                        }
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::Mse(p, t) => {
                    let g = self.nodes[id].grad.take().unwrap();
                    let gv = g[0];
                    let m = self.shape(p).0 as f64;
                    let factor = 2.0 * gv / m;
                    if self.nodes[p.0].requires_grad {
                        self.ensure_grad(p);
                        let tdata = std::mem::take(&mut self.nodes[t.0].data);
                        {
                            let pdata = std::mem::take(&mut self.nodes[p.0].data);
                            let gp = self.nodes[p.0].grad.as_mut().unwrap();
                            for ((acc, pv), tv) in gp.iter_mut().zip(&pdata).zip(&tdata) {
                                *acc += factor * (pv - tv);
                            }
                            self.nodes[p.0].data = pdata;
                        }
                        self.nodes[t.0].data = tdata;
                    }
                    if self.nodes[t.0].requires_grad {
                        self.ensure_grad(t);
                        let pdata = std::mem::take(&mut self.nodes[p.0].data);
                        {
                            let tdata = std::mem::take(&mut self.nodes[t.0].data);
                            let gt = self.nodes[t.0].grad.as_mut().unwrap();
                            for ((acc, pv), tv) in gt.iter_mut().zip(&pdata).zip(&tdata) {
                                *acc -= factor * (pv - tv);
                            }
                            self.nodes[t.0].data = tdata;
                        }
                        self.nodes[p.0].data = pdata;
                    }
                    self.nodes[id].grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn accumulate_scaled(&mut self, t: TensorId, g: &[f64], factor: f64) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        self.ensure_grad(t);
        let gt = self.nodes[t.0].grad.as_mut().unwrap();
        for (acc, gv) in gt.iter_mut().zip(g) {
            *acc += gv * factor;
        }
    }

    /// Gradients of all bound trainable parameters. A trainable leaf the loss
    /// never reached gets an explicit zero gradient, so optimizers can treat
    /// structurally dead parameters uniformly.
    pub fn grads_by_name(&self) -> GradMap {
        let mut map = GradMap::new();
        for node in &self.nodes {
            if let Some(name) = &node.name {
                if !node.requires_grad {
                    continue;
                }
                match &node.grad {
                    Some(grad) => map.insert(name.clone(), grad.clone()),
                    None => map.insert(name.clone(), vec![0.0; node.data.len()]),
                }
            }
        }
        map
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out = A(m x k) . B(k x n), overwriting out.
fn matmul_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(m x k) += G(m x n) . B^T where B is stored k x n.
fn matmul_nt_acc(out: &mut [f64], g: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (o, brow) in orow.iter_mut().zip(b.chunks(n)) {
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out(k x n) += A^T . G where A is stored m x k and G is m x n.
fn matmul_tn_acc(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
