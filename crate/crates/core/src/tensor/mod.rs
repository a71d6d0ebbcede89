//! Dense-tensor substrate with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a single-use compute graph: forward calls append nodes in
//! topological order, [`Tape::backward`] walks them once in reverse. Tensor
//! payloads are immutable after creation (shared via `Arc`), so concurrent
//! readers are safe; graph construction and backward are single-threaded.
//!
//! Shape rules, by op:
//! - elementwise `add`/`sub`/`mul`: identical shapes
//! - `add_bias`: `[r, c] + [c]` broadcast over rows
//! - `scale_rows`: `[r, c] * [r]` broadcast over columns
//! - `matmul`: `[m, k] x [k, n]`; `matmul_tb`: `[m, k] x [n, k]` (B transposed)
//! - `softmax_rows` / `log_softmax_rows` / `layer_norm`: rank 2, over the last axis
//! - reductions: `mean_all`/`sum_all` to `[1]`; `mean_rows`/`max_rows` `[r, c] -> [c]`
//! - `max_pool_groups`: `[g*k, c] -> [g, c]`, max over each block of `k` rows
//!
//! Max-style reductions break ties to the lowest flat index and route the
//! whole subgradient there.

mod kernels;
mod params;


pub use params::{read_checkpoint, write_checkpoint, ParamId, ParamStore, CHECKPOINT_MAGIC};

use std::collections::HashMap;
use std::sync::Arc;

use crate::Real;

/// Errors from graph construction and backward.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape { op: &'static str, expected: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for {bound}")]
    IndexOutOfBounds { op: &'static str, index: usize, bound: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this tape")]
    BackwardTwice,
}

type TResult<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Exp,
    Scale(Real),
    SoftmaxRows,
    LogSoftmaxRows,
    Reshape,
    MeanAll,
    SumAll,
    MeanRows,
    MaxRows,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    AddBias,
    ScaleRows,
    Matmul,
    MatmulTb,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary { kind: Unary, x: TensorId },
    Binary { kind: Binary, a: TensorId, b: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId },
    MaxPoolGroups { x: TensorId },
    GatherRows { x: TensorId, idx: Vec<usize> },
    PickPerRow { x: TensorId, cols: Vec<usize> },
    ConcatCols { xs: Vec<TensorId> },
    ConcatRows { xs: Vec<TensorId> },
}

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<Real>>,
    op: Op,
    requires_grad: bool,
    retain_grad: bool,
    grad: Option<Vec<Real>>,
    /// Cached per-row statistics (layer norm) or argmax indices (max reductions).
    aux: Aux,
}

enum Aux {
    None,
    Stats(Vec<Real>),
    ArgMax(Vec<usize>),
}

/// Single-use reverse-mode compute graph.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, TensorId)>,
    param_lookup: HashMap<ParamId, TensorId>,
    backward_run: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            param_lookup: HashMap::new(),
            backward_run: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorId) -> &[Real] {
        &self.nodes[t.0].data
    }

    /// Gradient buffer, populated by [`Tape::backward`] for leaves with
    /// `requires_grad` and for nodes marked via [`Tape::retain_grad`].
    pub fn grad(&self, t: TensorId) -> Option<&[Real]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Keep this node's gradient through the release pass of backward.
    pub fn retain_grad(&mut self, t: TensorId) {
        self.nodes[t.0].retain_grad = true;
    }

    /// `(param, gradient)` pairs in registration order, after backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[Real])> {
        self.param_nodes
            .iter()
            .filter_map(|&(pid, tid)| self.nodes[tid.0].grad.as_deref().map(|g| (pid, g)))
    }

    /// Hash of every discrete activation choice on the tape: relu sign
    /// masks and argmax picks of the max reductions. Two evaluations with
    /// the same signature lie in the same smooth region of the function,
    /// which makes finite differences between them valid derivative
    /// estimates.
    pub fn activation_signature(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            hash ^= v;
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Unary { kind: Unary::Relu, x } => {
                    for &v in self.nodes[x.0].data.iter() {
                        mix(u64::from(v > 0.0));
                    }
                }
                _ => {}
            }
            if let Aux::ArgMax(indices) = &node.aux {
                for &i in indices {
                    mix(i as u64 + 1);
                }
            }
        }
        hash
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<Real>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            op,
            requires_grad,
            retain_grad: false,
            grad: None,
            aux: Aux::None,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<Real>) -> TensorId {
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// Leaf with explicit `requires_grad` (tests and ad-hoc graphs).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<Real>, requires_grad: bool) -> TensorId {
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    /// Register a stored parameter on the tape. Repeat registrations of the
    /// same parameter return the same node so its gradient accumulates once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(&t) = self.param_lookup.get(&id) {
            return t;
        }
        let entry = store.entry(id);
        let requires_grad = entry.trainable;
        self.nodes.push(Node {
            shape: entry.shape.clone(),
            data: Arc::clone(&entry.data),
            op: Op::Leaf,
            requires_grad,
            retain_grad: false,
            grad: None,
            aux: Aux::None,
        });
        let t = TensorId(self.nodes.len() - 1);
        self.param_nodes.push((id, t));
        self.param_lookup.insert(id, t);
        t
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> TResult<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn rows_cols(&self, op: &'static str, t: TensorId) -> TResult<(usize, usize)> {
        let s = &self.nodes[t.0].shape;
        if s.len() != 2 {
            return Err(TensorError::BadShape { op, expected: "rank-2 tensor", shape: s.clone() });
        }
        Ok((s[0], s[1]))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn elementwise(&mut self, kind: Binary, op: &'static str, a: TensorId, b: TensorId) -> TResult<TensorId> {
        self.same_shape(op, a, b)?;
        let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let data: Vec<Real> = match kind {
            Binary::Add => av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect(),
            Binary::Sub => av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect(),
            Binary::Mul => av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TResult<TensorId> {
        self.elementwise(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TResult<TensorId> {
        self.elementwise(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TResult<TensorId> {
        self.elementwise(Binary::Mul, "mul", a, b)
    }

    /// `[r, c] + [c]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("add_bias", x)?;
        if self.nodes[bias.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].data;
        let bv = &self.nodes[bias.0].data;
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            for col in 0..c {
                data.push(xv[row * c + col] + bv[col]);
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[bias.0].requires_grad;
        Ok(self.push(vec![r, c], data, Op::Binary { kind: Binary::AddBias, a: x, b: bias }, rg))
    }

    /// `[r, c] * [r]`, per-row scale broadcast over columns.
    pub fn scale_rows(&mut self, x: TensorId, scales: TensorId) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("scale_rows", x)?;
        if self.nodes[scales.0].shape != [r] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[scales.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].data;
        let sv = &self.nodes[scales.0].data;
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            let s = sv[row];
            for col in 0..c {
                data.push(xv[row * c + col] * s);
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[scales.0].requires_grad;
        Ok(self.push(vec![r, c], data, Op::Binary { kind: Binary::ScaleRows, a: x, b: scales }, rg))
    }

    pub fn scale(&mut self, x: TensorId, factor: Real) -> TResult<TensorId> {
        let data: Vec<Real> = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::Unary { kind: Unary::Scale(factor), x }, rg))
    }

    pub fn relu(&mut self, x: TensorId) -> TResult<TensorId> {
        let data: Vec<Real> = self.nodes[x.0].data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::Unary { kind: Unary::Relu, x }, rg))
    }

    pub fn exp(&mut self, x: TensorId) -> TResult<TensorId> {
        let data: Vec<Real> = self.nodes[x.0].data.iter().map(|v| v.exp()).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::Unary { kind: Unary::Exp, x }, rg))
    }

    /// View with a new shape; element count must match.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TResult<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = Arc::clone(&self.nodes[x.0].data);
        let rg = self.nodes[x.0].requires_grad;
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data,
            op: Op::Unary { kind: Unary::Reshape, x },
            requires_grad: rg,
            retain_grad: false,
            grad: None,
            aux: Aux::None,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    // ── matrix products ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TResult<TensorId> {
        let (m, k) = self.rows_cols("matmul", a)?;
        let (k2, n) = self.rows_cols("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        kernels::mm_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut data, m, k, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![m, n], data, Op::Binary { kind: Binary::Matmul, a, b }, rg))
    }

    /// `a [m, k] x b [n, k]^T -> [m, n]`.
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> TResult<TensorId> {
        let (m, k) = self.rows_cols("matmul_tb", a)?;
        let (n, k2) = self.rows_cols("matmul_tb", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tb",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        kernels::mm_tb_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut data, m, k, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![m, n], data, Op::Binary { kind: Binary::MatmulTb, a, b }, rg))
    }

    // ── row-wise normalizations ─────────────────────────────────────

    pub fn softmax_rows(&mut self, x: TensorId) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("softmax_rows", x)?;
        let xv = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            let slice = &xv[row * c..(row + 1) * c];
            let max = slice.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            let start = data.len();
            for &v in slice {
                let e = (v - max).exp();
                data.push(e);
                denom += e;
            }
            for v in &mut data[start..] {
                *v /= denom;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![r, c], data, Op::Unary { kind: Unary::SoftmaxRows, x }, rg))
    }

    pub fn log_softmax_rows(&mut self, x: TensorId) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("log_softmax_rows", x)?;
        let xv = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            let slice = &xv[row * c..(row + 1) * c];
            let max = slice.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let log_denom = max + slice.iter().map(|&v| (v - max).exp()).sum::<Real>().ln();
            for &v in slice {
                data.push(v - log_denom);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![r, c], data, Op::Unary { kind: Unary::LogSoftmaxRows, x }, rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: Real) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("layer_norm", x)?;
        for t in [gamma, beta] {
            if self.nodes[t.0].shape != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[t.0].shape.clone(),
                });
            }
        }
        let xv = &self.nodes[x.0].data;
        let gv = &self.nodes[gamma.0].data;
        let bv = &self.nodes[beta.0].data;
        let mut data = Vec::with_capacity(r * c);
        let mut stats = Vec::with_capacity(2 * r);
        for row in 0..r {
            let slice = &xv[row * c..(row + 1) * c];
            let mean = slice.iter().sum::<Real>() / c as Real;
            let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / c as Real;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push(mean);
            stats.push(rstd);
            for col in 0..c {
                data.push((slice[col] - mean) * rstd * gv[col] + bv[col]);
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        let id = self.push(vec![r, c], data, Op::LayerNorm { x, gamma, beta }, rg);
        self.nodes[id.0].aux = Aux::Stats(stats);
        Ok(id)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn mean_all(&mut self, x: TensorId) -> TResult<TensorId> {
        let n = self.nodes[x.0].data.len();
        let v = self.nodes[x.0].data.iter().sum::<Real>() / n as Real;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![1], vec![v], Op::Unary { kind: Unary::MeanAll, x }, rg))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TResult<TensorId> {
        let v = self.nodes[x.0].data.iter().sum::<Real>();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![1], vec![v], Op::Unary { kind: Unary::SumAll, x }, rg))
    }

    /// Column means over rows: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, x: TensorId) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("mean_rows", x)?;
        let xv = &self.nodes[x.0].data;
        let mut data = vec![0.0; c];
        for row in 0..r {
            for col in 0..c {
                data[col] += xv[row * c + col];
            }
        }
        for v in &mut data {
            *v /= r as Real;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![c], data, Op::Unary { kind: Unary::MeanRows, x }, rg))
    }

    /// Column maxima over rows: `[r, c] -> [c]`. Ties go to the lowest row.
    pub fn max_rows(&mut self, x: TensorId) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("max_rows", x)?;
        if r == 0 {
            return Err(TensorError::BadShape {
                op: "max_rows",
                expected: "at least one row",
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].data;
        let mut data = vec![Real::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for row in 0..r {
            for col in 0..c {
                let v = xv[row * c + col];
                if v > data[col] {
                    data[col] = v;
                    argmax[col] = row;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push(vec![c], data, Op::Unary { kind: Unary::MaxRows, x }, rg);
        self.nodes[id.0].aux = Aux::ArgMax(argmax);
        Ok(id)
    }

    /// Blockwise max over consecutive groups of `k` rows: `[g*k, c] -> [g, c]`.
    pub fn max_pool_groups(&mut self, x: TensorId, k: usize) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("max_pool_groups", x)?;
        if k == 0 || r % k != 0 {
            return Err(TensorError::BadShape {
                op: "max_pool_groups",
                expected: "row count divisible by the group size",
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        let g = r / k;
        let xv = &self.nodes[x.0].data;
        let mut data = vec![Real::NEG_INFINITY; g * c];
        let mut argmax = vec![0usize; g * c];
        for grp in 0..g {
            for i in 0..k {
                let row = grp * k + i;
                for col in 0..c {
                    let v = xv[row * c + col];
                    if v > data[grp * c + col] {
                        data[grp * c + col] = v;
                        argmax[grp * c + col] = row;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push(vec![g, c], data, Op::MaxPoolGroups { x }, rg);
        self.nodes[id.0].aux = Aux::ArgMax(argmax);
        Ok(id)
    }

    // ── indexing ────────────────────────────────────────────────────

    /// Row gather: `out[i] = x[idx[i]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("gather_rows", x)?;
        let xv = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfBounds { op: "gather_rows", index: i, bound: r });
            }
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![idx.len(), c], data, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Per-row element pick: `out[i] = x[i, cols[i]]`, result `[r]`.
    pub fn pick_per_row(&mut self, x: TensorId, cols: &[usize]) -> TResult<TensorId> {
        let (r, c) = self.rows_cols("pick_per_row", x)?;
        if cols.len() != r {
            return Err(TensorError::BadShape {
                op: "pick_per_row",
                expected: "one column index per row",
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(r);
        for (row, &col) in cols.iter().enumerate() {
            if col >= c {
                return Err(TensorError::IndexOutOfBounds { op: "pick_per_row", index: col, bound: c });
            }
            data.push(xv[row * c + col]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![r], data, Op::PickPerRow { x, cols: cols.to_vec() }, rg))
    }

    // ── concatenation ───────────────────────────────────────────────

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> TResult<TensorId> {
        if xs.is_empty() {
            return Err(TensorError::BadShape { op: "concat_cols", expected: "at least one input", shape: vec![] });
        }
        let (r, _) = self.rows_cols("concat_cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for &t in xs {
            let (rt, ct) = self.rows_cols("concat_cols", t)?;
            if rt != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[xs[0].0].shape.clone(),
                    rhs: self.nodes[t.0].shape.clone(),
                });
            }
            widths.push(ct);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&t, &w) in xs.iter().zip(widths.iter()) {
                let v = &self.nodes[t.0].data;
                data.extend_from_slice(&v[row * w..(row + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&t| self.nodes[t.0].requires_grad);
        Ok(self.push(vec![r, total], data, Op::ConcatCols { xs: xs.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[TensorId]) -> TResult<TensorId> {
        if xs.is_empty() {
            return Err(TensorError::BadShape { op: "concat_rows", expected: "at least one input", shape: vec![] });
        }
        let (_, c) = self.rows_cols("concat_rows", xs[0])?;
        let mut total_rows = 0;
        for &t in xs {
            let (rt, ct) = self.rows_cols("concat_rows", t)?;
            if ct != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[xs[0].0].shape.clone(),
                    rhs: self.nodes[t.0].shape.clone(),
                });
            }
            total_rows += rt;
        }
        let mut data = Vec::with_capacity(total_rows * c);
        for &t in xs {
            data.extend_from_slice(&self.nodes[t.0].data);
        }
        let rg = xs.iter().any(|&t| self.nodes[t.0].requires_grad);
        Ok(self.push(vec![total_rows, c], data, Op::ConcatRows { xs: xs.to_vec() }, rg))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each node is visited exactly once;
    /// gradients of non-leaf nodes are released afterwards unless retained.
    pub fn backward(&mut self, loss: TensorId) -> TResult<()> {
        if self.backward_run {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        self.backward_run = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("grad present");
            self.propagate(i, &grad);
            let keep = matches!(self.nodes[i].op, Op::Leaf) || self.nodes[i].retain_grad;
            if keep {
                self.nodes[i].grad = Some(grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, t: TensorId, update: impl FnOnce(&mut [Real])) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        if self.nodes[t.0].grad.is_none() {
            self.nodes[t.0].grad = Some(vec![0.0; self.nodes[t.0].data.len()]);
        }
        update(self.nodes[t.0].grad.as_mut().expect("just initialized"));
    }

    fn propagate(&mut self, node: usize, dy: &[Real]) {
        // Clone the op descriptor out so grad accumulation can borrow mutably.
        let op = self.nodes[node].op.clone();
        match op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                match kind {
                    Unary::Relu => {
                        let xv = Arc::clone(&self.nodes[x.0].data);
                        self.accumulate(x, |g| {
                            for ((g, &d), &v) in g.iter_mut().zip(dy).zip(xv.iter()) {
                                if v > 0.0 {
                                    *g += d;
                                }
                            }
                        });
                    }
                    Unary::Exp => {
                        let yv = Arc::clone(&self.nodes[node].data);
                        self.accumulate(x, |g| {
                            for ((g, &d), &y) in g.iter_mut().zip(dy).zip(yv.iter()) {
                                *g += d * y;
                            }
                        });
                    }
                    Unary::Scale(f) => {
                        self.accumulate(x, |g| {
                            for (g, &d) in g.iter_mut().zip(dy) {
                                *g += d * f;
                            }
                        });
                    }
                    Unary::Reshape => {
                        self.accumulate(x, |g| {
                            for (g, &d) in g.iter_mut().zip(dy) {
                                *g += d;
                            }
                        });
                    }
                    Unary::SoftmaxRows => {
                        let yv = Arc::clone(&self.nodes[node].data);
                        let c = self.nodes[node].shape[1];
                        self.accumulate(x, |g| {
                            for row in 0..yv.len() / c {
                                let y = &yv[row * c..(row + 1) * c];
                                let d = &dy[row * c..(row + 1) * c];
                                let dot: Real = y.iter().zip(d).map(|(&a, &b)| a * b).sum();
                                let gr = &mut g[row * c..(row + 1) * c];
                                for col in 0..c {
                                    gr[col] += y[col] * (d[col] - dot);
                                }
                            }
                        });
                    }
                    Unary::LogSoftmaxRows => {
                        let yv = Arc::clone(&self.nodes[node].data);
                        let c = self.nodes[node].shape[1];
                        self.accumulate(x, |g| {
                            for row in 0..yv.len() / c {
                                let y = &yv[row * c..(row + 1) * c];
                                let d = &dy[row * c..(row + 1) * c];
                                let sum: Real = d.iter().sum();
                                let gr = &mut g[row * c..(row + 1) * c];
                                for col in 0..c {
                                    gr[col] += d[col] - y[col].exp() * sum;
                                }
                            }
                        });
                    }
                    Unary::MeanAll => {
                        let n = self.nodes[x.0].data.len() as Real;
                        self.accumulate(x, |g| {
                            let d = dy[0] / n;
                            for g in g.iter_mut() {
                                *g += d;
                            }
                        });
                    }
                    Unary::SumAll => {
                        self.accumulate(x, |g| {
                            for g in g.iter_mut() {
                                *g += dy[0];
                            }
                        });
                    }
                    Unary::MeanRows => {
                        let c = self.nodes[node].shape[0];
                        let r = self.nodes[x.0].shape[0];
                        self.accumulate(x, |g| {
                            for row in 0..r {
                                for col in 0..c {
                                    g[row * c + col] += dy[col] / r as Real;
                                }
                            }
                        });
                    }
                    Unary::MaxRows => {
                        let c = self.nodes[node].shape[0];
                        let argmax = match &self.nodes[node].aux {
                            Aux::ArgMax(a) => a.clone(),
                            _ => unreachable!("max_rows stores argmax"),
                        };
                        self.accumulate(x, |g| {
                            for col in 0..c {
                                g[argmax[col] * c + col] += dy[col];
                            }
                        });
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                match kind {
                    Binary::Add => {
                        self.accumulate(a, |g| {
                            for (g, &d) in g.iter_mut().zip(dy) {
                                *g += d;
                            }
                        });
                        self.accumulate(b, |g| {
                            for (g, &d) in g.iter_mut().zip(dy) {
                                *g += d;
                            }
                        });
                    }
                    Binary::Sub => {
                        self.accumulate(a, |g| {
                            for (g, &d) in g.iter_mut().zip(dy) {
                                *g += d;
                            }
                        });
                        self.accumulate(b, |g| {
                            for (g, &d) in g.iter_mut().zip(dy) {
                                *g -= d;
                            }
                        });
                    }
                    Binary::Mul => {
                        let av = Arc::clone(&self.nodes[a.0].data);
                        let bv = Arc::clone(&self.nodes[b.0].data);
                        self.accumulate(a, |g| {
                            for ((g, &d), &v) in g.iter_mut().zip(dy).zip(bv.iter()) {
                                *g += d * v;
                            }
                        });
                        self.accumulate(b, |g| {
                            for ((g, &d), &v) in g.iter_mut().zip(dy).zip(av.iter()) {
                                *g += d * v;
                            }
                        });
                    }
                    Binary::AddBias => {
                        let c = self.nodes[b.0].shape[0];
                        self.accumulate(a, |g| {
                            for (g, &d) in g.iter_mut().zip(dy) {
                                *g += d;
                            }
                        });
                        self.accumulate(b, |g| {
                            for (i, &d) in dy.iter().enumerate() {
                                g[i % c] += d;
                            }
                        });
                    }
                    Binary::ScaleRows => {
                        let av = Arc::clone(&self.nodes[a.0].data);
                        let sv = Arc::clone(&self.nodes[b.0].data);
                        let c = self.nodes[a.0].shape[1];
                        self.accumulate(a, |g| {
                            for (row, &s) in sv.iter().enumerate() {
                                for col in 0..c {
                                    g[row * c + col] += dy[row * c + col] * s;
                                }
                            }
                        });
                        self.accumulate(b, |g| {
                            for (row, g) in g.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for col in 0..c {
                                    acc += dy[row * c + col] * av[row * c + col];
                                }
                                *g += acc;
                            }
                        });
                    }
                    Binary::Matmul => {
                        // dA = dY B^T ; dB = A^T dY
                        let av = Arc::clone(&self.nodes[a.0].data);
                        let bv = Arc::clone(&self.nodes[b.0].data);
                        let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                        let n = self.nodes[b.0].shape[1];
                        self.accumulate(a, |g| kernels::mm_tb_acc(dy, &bv, g, m, n, k));
                        self.accumulate(b, |g| kernels::mm_ta_acc(&av, dy, g, m, k, n));
                    }
                    Binary::MatmulTb => {
                        // Y = A B^T ; dA = dY B ; dB = dY^T A
                        let av = Arc::clone(&self.nodes[a.0].data);
                        let bv = Arc::clone(&self.nodes[b.0].data);
                        let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                        let n = self.nodes[b.0].shape[0];
                        self.accumulate(a, |g| kernels::mm_acc(dy, &bv, g, m, n, k));
                        self.accumulate(b, |g| kernels::mm_ta_acc(dy, &av, g, m, n, k));
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = Arc::clone(&self.nodes[x.0].data);
                let gv = Arc::clone(&self.nodes[gamma.0].data);
                let stats = match &self.nodes[node].aux {
                    Aux::Stats(s) => s.clone(),
                    _ => unreachable!("layer_norm stores stats"),
                };
                let c = self.nodes[x.0].shape[1];
                let r = self.nodes[x.0].shape[0];
                self.accumulate(x, |g| {
                    for row in 0..r {
                        let (mean, rstd) = (stats[2 * row], stats[2 * row + 1]);
                        let xs = &xv[row * c..(row + 1) * c];
                        let ds = &dy[row * c..(row + 1) * c];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_xhat = 0.0;
                        for col in 0..c {
                            let xhat = (xs[col] - mean) * rstd;
                            let dh = ds[col] * gv[col];
                            sum_dh += dh;
                            sum_dh_xhat += dh * xhat;
                        }
                        let inv_c = 1.0 / c as Real;
                        let gr = &mut g[row * c..(row + 1) * c];
                        for col in 0..c {
                            let xhat = (xs[col] - mean) * rstd;
                            let dh = ds[col] * gv[col];
                            gr[col] += rstd * (dh - inv_c * sum_dh - xhat * inv_c * sum_dh_xhat);
                        }
                    }
                });
                self.accumulate(gamma, |g| {
                    for row in 0..r {
                        let (mean, rstd) = (stats[2 * row], stats[2 * row + 1]);
                        for col in 0..c {
                            let xhat = (xv[row * c + col] - mean) * rstd;
                            g[col] += dy[row * c + col] * xhat;
                        }
                    }
                });
                self.accumulate(beta, |g| {
                    for row in 0..r {
                        for col in 0..c {
                            g[col] += dy[row * c + col];
                        }
                    }
                });
            }
            Op::MaxPoolGroups { x } => {
                let c = self.nodes[node].shape[1];
                let g_count = self.nodes[node].shape[0];
                let argmax = match &self.nodes[node].aux {
                    Aux::ArgMax(a) => a.clone(),
                    _ => unreachable!("max_pool_groups stores argmax"),
                };
                self.accumulate(x, |g| {
                    for grp in 0..g_count {
                        for col in 0..c {
                            g[argmax[grp * c + col] * c + col] += dy[grp * c + col];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.nodes[node].shape[1];
                self.accumulate(x, |g| {
                    for (out_row, &src) in idx.iter().enumerate() {
                        for col in 0..c {
                            g[src * c + col] += dy[out_row * c + col];
                        }
                    }
                });
            }
            Op::PickPerRow { x, cols } => {
                let c = self.nodes[x.0].shape[1];
                self.accumulate(x, |g| {
                    for (row, &col) in cols.iter().enumerate() {
                        g[row * c + col] += dy[row];
                    }
                });
            }
            Op::ConcatCols { xs } => {
                let r = self.nodes[node].shape[0];
                let total = self.nodes[node].shape[1];
                let mut offset = 0;
                for t in xs {
                    let w = self.nodes[t.0].shape[1];
                    let off = offset;
                    self.accumulate(t, |g| {
                        for row in 0..r {
                            for col in 0..w {
                                g[row * w + col] += dy[row * total + off + col];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows { xs } => {
                let c = self.nodes[node].shape[1];
                let mut offset = 0;
                for t in xs {
                    let rows = self.nodes[t.0].shape[0];
                    let off = offset;
                    self.accumulate(t, |g| {
                        for (g, &d) in g.iter_mut().zip(&dy[off * c..(off + rows) * c]) {
                            *g += d;
                        }
                    });
                    offset += rows;
                }
            }
        }
    }
}
