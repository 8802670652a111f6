//! Forward evaluation graph with reverse-mode gradients.
//!
//! A [`Graph`] is a single-use tape: values are computed eagerly as ops are
//! recorded, and [`Graph::backward`] walks the tape once in reverse to
//! accumulate adjoints. Nodes are appended in topological order by
//! construction (every parent index precedes its consumers), which also fixes
//! the summation order of gradient accumulation — two backward passes over the
//! same graph are bitwise identical.
//!
//! The op set is the minimum the rest of the crate needs: elementwise
//! arithmetic with broadcasting, matrix product/transpose, the usual smooth
//! nonlinearities, reductions, shape surgery (broadcast/reshape/concat/slice),
//! and the linear-algebra pair used by Gaussian models — Cholesky
//! factorisation and triangular solves — with their standard reverse-mode
//! formulas.

use super::tensor::{
    broadcast_to, broadcast_zip, cholesky, matmul, reduce_to, sigmoid, silu, softplus,
    solve_lower, solve_lower_transpose, transpose, Tensor,
};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Trainable parameter; gradients are collected for these.
    Leaf,
    /// Non-trainable input (data, RNG draws, schedule coefficients).
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId),
    LogSumExp(NodeId),
    LogSumExpAxis(NodeId, usize),
    BroadcastTo(NodeId),
    Reshape(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Cholesky(NodeId),
    /// `X = L⁻¹·B` (forward substitution).
    SolveLower(NodeId, NodeId),
    /// `X = L⁻ᵀ·B` (back substitution).
    SolveLowerT(NodeId, NodeId),
    TrilStrict(NodeId),
    DiagEmbed(NodeId),
    DiagPart(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for `id`; zeros if the node never influenced the root.
    pub fn get(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient tensor for `id` if it received any adjoint.
    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Single-use forward/backward tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    /// Empty graph.
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Computed value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when no nodes have been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── inputs ────────────────────────────────────────────────────────────

    /// Trainable input; [`Graph::backward`] reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, t, false)
    }

    /// Rank-0 constant.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ── elementwise arithmetic (broadcasting) ─────────────────────────────

    /// `a + b` with trailing-axis broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    /// `a − b` with broadcasting.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    /// Elementwise `a ∘ b` with broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    /// Elementwise `a / b` with broadcasting.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Div(a, b), v, rg))
    }

    /// `−a`.
    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(Op::Neg(a), v, rg)
    }

    /// `c·a` for a compile-time-known constant `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scaled(c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), v, rg)
    }

    // ── linear algebra ────────────────────────────────────────────────────

    /// Matrix product `a·b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul(a, b), v, rg))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = transpose(self.value(a));
        let rg = self.rg(a);
        self.push(Op::Transpose(a), v, rg)
    }

    /// Cholesky factor `L` of a symmetric positive-definite matrix.
    ///
    /// Only the lower triangle of the input is read, and the gradient is
    /// reported on the lower triangle only (the strictly-upper entries never
    /// influence the output). No jitter is applied; see
    /// [`crate::diffcore::tensor::cholesky_jittered`] for the Gram-matrix
    /// entry point used by the GP layers.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        let v = cholesky(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Cholesky(a), v, rg))
    }

    /// Cholesky of a Gram matrix with the escalating-jitter policy: adds
    /// `1e-6·mean(diag)` to the diagonal, escalating tenfold to at most
    /// `1e-2·mean(diag)` before failing. The jitter magnitude is treated as a
    /// constant of the current values (no gradient through the jitter scale).
    pub fn cholesky_jittered(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).shape()[0];
        let mean_diag = (0..n).map(|i| self.value(a).at(i, i)).sum::<f64>() / n as f64;
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut rel = super::tensor::BASE_JITTER;
        loop {
            let eye = self.constant(Tensor::eye(n).scaled(rel * scale));
            let aj = self.add(a, eye)?;
            match self.cholesky(aj) {
                Ok(l) => return Ok(l),
                Err(_) if rel < super::tensor::MAX_JITTER => rel *= 10.0,
                Err(_) => {
                    return Err(Error::NotPositiveDefinite { max_jitter: rel * scale })
                }
            }
        }
    }

    /// Triangular solve `X = L⁻¹·B` with `L` lower triangular.
    pub fn solve_lower(&mut self, l: NodeId, b: NodeId) -> Result<NodeId> {
        let v = solve_lower(self.value(l), self.value(b))?;
        let rg = self.rg(l) || self.rg(b);
        Ok(self.push(Op::SolveLower(l, b), v, rg))
    }

    /// Triangular solve `X = L⁻ᵀ·B` with `L` lower triangular.
    pub fn solve_lower_t(&mut self, l: NodeId, b: NodeId) -> Result<NodeId> {
        let v = solve_lower_transpose(self.value(l), self.value(b))?;
        let rg = self.rg(l) || self.rg(b);
        Ok(self.push(Op::SolveLowerT(l, b), v, rg))
    }

    /// Zeroes the diagonal and upper triangle, keeping the strictly-lower part.
    pub fn tril_strict(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m.min(i) {
                out.data_mut()[i * m + j] = t.at(i, j);
            }
        }
        let rg = self.rg(a);
        self.push(Op::TrilStrict(a), out, rg)
    }

    /// Embeds a length-n vector as an n×n diagonal matrix.
    pub fn diag_embed(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1, "diag_embed expects a vector");
        let n = t.len();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            out.data_mut()[i * n + i] = t.data()[i];
        }
        let rg = self.rg(a);
        self.push(Op::DiagEmbed(a), out, rg)
    }

    /// Extracts the diagonal of a square matrix as a vector.
    pub fn diag_part(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let n = t.rows();
        let v = Tensor::vector((0..n).map(|i| t.at(i, i)).collect());
        let rg = self.rg(a);
        self.push(Op::DiagPart(a), v, rg)
    }

    // ── elementwise nonlinearities ────────────────────────────────────────

    /// Elementwise `exp`.
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(Op::Exp(a), v, rg)
    }

    /// Elementwise natural log.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(Op::Log(a), v, rg)
    }

    /// Elementwise `tanh`.
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), v, rg)
    }

    /// Elementwise SiLU `x·σ(x)` — the only activation used by the nets here.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(silu);
        let rg = self.rg(a);
        self.push(Op::Silu(a), v, rg)
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    /// Elementwise stable `log(1+eˣ)`.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(Op::Softplus(a), v, rg)
    }

    /// Elementwise square root.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), v, rg)
    }

    /// Elementwise square.
    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(Op::Square(a), v, rg)
    }

    /// Elementwise `max(x, c)`; subgradient 0 on the clamped side.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(c));
        let rg = self.rg(a);
        self.push(Op::ClampMin(a, c), v, rg)
    }

    // ── reductions ────────────────────────────────────────────────────────

    /// Sum of all elements (scalar).
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    /// Mean of all elements (scalar).
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(Op::Mean(a), v, rg)
    }

    /// Sum of a matrix over one axis: axis 0 → `1×m`, axis 1 → `n×1`.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 || axis > 1 {
            return Err(Error::Shape(format!("sum_axis({axis}) on shape {:?}", t.shape())));
        }
        let (n, m) = (t.rows(), t.cols());
        let v = if axis == 0 {
            let mut out = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    out[j] += t.at(i, j);
                }
            }
            Tensor::matrix(1, m, out)
        } else {
            let mut out = vec![0.0; n];
            for i in 0..n {
                for j in 0..m {
                    out[i] += t.at(i, j);
                }
            }
            Tensor::matrix(n, 1, out)
        };
        let rg = self.rg(a);
        Ok(self.push(Op::SumAxis(a), v, rg))
    }

    /// `log Σ exp(x)` over all elements, max-shifted for stability.
    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = Tensor::scalar(hi + t.data().iter().map(|x| (x - hi).exp()).sum::<f64>().ln());
        let rg = self.rg(a);
        self.push(Op::LogSumExp(a), v, rg)
    }

    /// Row-wise (`axis=1`, → `n×1`) or column-wise (`axis=0`, → `1×m`)
    /// log-sum-exp of a matrix.
    pub fn log_sum_exp_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 || axis > 1 {
            return Err(Error::Shape(format!("log_sum_exp_axis({axis}) on {:?}", t.shape())));
        }
        let (n, m) = (t.rows(), t.cols());
        let lse = |vals: Vec<f64>| {
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi + vals.iter().map(|x| (x - hi).exp()).sum::<f64>().ln()
        };
        let v = if axis == 1 {
            Tensor::matrix(n, 1, (0..n).map(|i| lse((0..m).map(|j| t.at(i, j)).collect())).collect())
        } else {
            Tensor::matrix(1, m, (0..m).map(|j| lse((0..n).map(|i| t.at(i, j)).collect())).collect())
        };
        let rg = self.rg(a);
        Ok(self.push(Op::LogSumExpAxis(a, axis), v, rg))
    }

    // ── shape surgery ─────────────────────────────────────────────────────

    /// Broadcasts `a` to `shape` (the gradient sums back over stretched axes).
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = broadcast_to(self.value(a), shape)?;
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastTo(a), v, rg))
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::Shape(format!("reshape {:?} to {:?}", t.shape(), shape)));
        }
        let v = t.reshaped(shape);
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), v, rg))
    }

    /// Concatenates two matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(Error::Shape(format!("concat_cols {:?} ++ {:?}", ta.shape(), tb.shape())));
        }
        let (n, ma, mb) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            out.extend_from_slice(&ta.data()[i * ma..(i + 1) * ma]);
            out.extend_from_slice(&tb.data()[i * mb..(i + 1) * mb]);
        }
        let v = Tensor::matrix(n, ma + mb, out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatCols(a, b), v, rg))
    }

    /// Rows `lo..hi` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 || hi > t.rows() || lo >= hi {
            return Err(Error::Shape(format!("slice_rows {lo}..{hi} of {:?}", t.shape())));
        }
        let m = t.cols();
        let v = Tensor::matrix(hi - lo, m, t.data()[lo * m..hi * m].to_vec());
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows(a, lo, hi), v, rg))
    }

    /// Columns `lo..hi` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 || hi > t.cols() || lo >= hi {
            return Err(Error::Shape(format!("slice_cols {lo}..{hi} of {:?}", t.shape())));
        }
        let (n, m) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(n * (hi - lo));
        for i in 0..n {
            out.extend_from_slice(&t.data()[i * m + lo..i * m + hi]);
        }
        let v = Tensor::matrix(n, hi - lo, out);
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, lo, hi), v, rg))
    }

    // ── reverse pass ──────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `root` with respect to every leaf.
    ///
    /// Nodes are visited in strictly decreasing index order, and each parent's
    /// adjoint is accumulated in that fixed order, so the result is
    /// deterministic for a given graph.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(
            self.value(root).shape().to_vec(),
            vec![1.0],
        ));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.accumulate(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) -> Result<()> {
        let send = |id: NodeId, contrib: Tensor, grads: &mut Vec<Option<Tensor>>| {
            if !self.rg(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        let val = |id: NodeId| self.value(id);
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                send(*a, reduce_to(g, val(*a).shape()), grads);
                send(*b, reduce_to(g, val(*b).shape()), grads);
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(g, val(*a).shape()), grads);
                send(*b, reduce_to(&g.scaled(-1.0), val(*b).shape()), grads);
            }
            Op::Mul(a, b) => {
                let ga = broadcast_zip(g, val(*b), |x, y| x * y)?;
                let gb = broadcast_zip(g, val(*a), |x, y| x * y)?;
                send(*a, reduce_to(&ga, val(*a).shape()), grads);
                send(*b, reduce_to(&gb, val(*b).shape()), grads);
            }
            Op::Div(a, b) => {
                let ga = broadcast_zip(g, val(*b), |x, y| x / y)?;
                send(*a, reduce_to(&ga, val(*a).shape()), grads);
                let ratio = broadcast_zip(val(*a), val(*b), |x, y| -x / (y * y))?;
                let gb = broadcast_zip(g, &ratio, |x, y| x * y)?;
                send(*b, reduce_to(&gb, val(*b).shape()), grads);
            }
            Op::Neg(a) => send(*a, g.scaled(-1.0), grads),
            Op::Scale(a, c) => send(*a, g.scaled(*c), grads),
            Op::AddScalar(a) => send(*a, g.clone(), grads),
            Op::Matmul(a, b) => {
                send(*a, matmul(g, &transpose(val(*b)))?, grads);
                send(*b, matmul(&transpose(val(*a)), g)?, grads);
            }
            Op::Transpose(a) => send(*a, transpose(g), grads),
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                send(*a, g.zip(y, |gi, yi| gi * yi), grads);
            }
            Op::Log(a) => send(*a, g.zip(val(*a), |gi, xi| gi / xi), grads),
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                send(*a, g.zip(y, |gi, yi| gi * (1.0 - yi * yi)), grads);
            }
            Op::Silu(a) => {
                // d/dx x·σ(x) = σ(x)·(1 + x·(1−σ(x)))
                let d = val(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                send(*a, g.zip(&d, |gi, di| gi * di), grads);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                send(*a, g.zip(y, |gi, yi| gi * yi * (1.0 - yi)), grads);
            }
            Op::Softplus(a) => {
                let d = val(*a).map(sigmoid);
                send(*a, g.zip(&d, |gi, di| gi * di), grads);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                send(*a, g.zip(y, |gi, yi| gi / (2.0 * yi)), grads);
            }
            Op::Square(a) => send(*a, g.zip(val(*a), |gi, xi| gi * 2.0 * xi), grads),
            Op::ClampMin(a, c) => {
                send(*a, g.zip(val(*a), |gi, xi| if xi > *c { gi } else { 0.0 }), grads);
            }
            Op::Sum(a) => {
                let shape = val(*a).shape().to_vec();
                send(*a, broadcast_to(&Tensor::new(vec![], g.data().to_vec()), &shape)?, grads);
            }
            Op::Mean(a) => {
                let shape = val(*a).shape().to_vec();
                let n = val(*a).len() as f64;
                let seed = Tensor::new(vec![], vec![g.data()[0] / n]);
                send(*a, broadcast_to(&seed, &shape)?, grads);
            }
            Op::SumAxis(a) => {
                send(*a, broadcast_to(g, val(*a).shape())?, grads);
            }
            Op::LogSumExp(a) => {
                let y = self.nodes[idx].value.item();
                let gx = g.data()[0];
                send(*a, val(*a).map(|x| gx * (x - y).exp()), grads);
            }
            Op::LogSumExpAxis(a, axis) => {
                let x = val(*a);
                let y = &self.nodes[idx].value;
                let (n, m) = (x.rows(), x.cols());
                let mut out = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    for j in 0..m {
                        let (yv, gv) = if *axis == 1 {
                            (y.at(i, 0), g.at(i, 0))
                        } else {
                            (y.at(0, j), g.at(0, j))
                        };
                        out.data_mut()[i * m + j] = gv * (x.at(i, j) - yv).exp();
                    }
                }
                send(*a, out, grads);
            }
            Op::BroadcastTo(a) => send(*a, reduce_to(g, val(*a).shape()), grads),
            Op::Reshape(a) => send(*a, g.reshaped(val(*a).shape().to_vec()), grads),
            Op::ConcatCols(a, b) => {
                let (ma, mb) = (val(*a).cols(), val(*b).cols());
                let n = val(*a).rows();
                let mut ga = Vec::with_capacity(n * ma);
                let mut gb = Vec::with_capacity(n * mb);
                for i in 0..n {
                    ga.extend_from_slice(&g.data()[i * (ma + mb)..i * (ma + mb) + ma]);
                    gb.extend_from_slice(&g.data()[i * (ma + mb) + ma..(i + 1) * (ma + mb)]);
                }
                send(*a, Tensor::matrix(n, ma, ga), grads);
                send(*b, Tensor::matrix(n, mb, gb), grads);
            }
            Op::SliceRows(a, lo, _hi) => {
                let mut out = Tensor::zeros(val(*a).shape());
                let m = val(*a).cols();
                for i in 0..g.rows() {
                    for j in 0..m {
                        out.data_mut()[(lo + i) * m + j] = g.at(i, j);
                    }
                }
                send(*a, out, grads);
            }
            Op::SliceCols(a, lo, _hi) => {
                let mut out = Tensor::zeros(val(*a).shape());
                let m = val(*a).cols();
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        out.data_mut()[i * m + lo + j] = g.at(i, j);
                    }
                }
                send(*a, out, grads);
            }
            Op::Cholesky(a) => {
                send(*a, cholesky_backward(&self.nodes[idx].value, g)?, grads);
            }
            Op::SolveLower(l, b) => {
                // X = L⁻¹B:  B̄ = L⁻ᵀX̄,  L̄ = −B̄·Xᵀ (lower triangle).
                let x = &self.nodes[idx].value;
                let w = solve_lower_transpose(val(*l), g)?;
                let lbar = matmul(&w, &transpose(x))?.scaled(-1.0);
                send(*l, mask_lower(&lbar), grads);
                send(*b, w, grads);
            }
            Op::SolveLowerT(l, b) => {
                // X = L⁻ᵀB:  B̄ = L⁻¹X̄,  L̄ = −X·B̄ᵀ (lower triangle).
                let x = &self.nodes[idx].value;
                let w = solve_lower(val(*l), g)?;
                let lbar = matmul(x, &transpose(&w))?.scaled(-1.0);
                send(*l, mask_lower(&lbar), grads);
                send(*b, w, grads);
            }
            Op::TrilStrict(a) => {
                let t = val(*a);
                let (n, m) = (t.rows(), t.cols());
                let mut out = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    for j in 0..m.min(i) {
                        out.data_mut()[i * m + j] = g.at(i, j);
                    }
                }
                send(*a, out, grads);
            }
            Op::DiagEmbed(a) => {
                let n = val(*a).len();
                send(*a, Tensor::vector((0..n).map(|i| g.at(i, i)).collect()), grads);
            }
            Op::DiagPart(a) => {
                let n = val(*a).rows();
                let mut out = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    out.data_mut()[i * n + i] = g.data()[i];
                }
                send(*a, out, grads);
            }
        }
        Ok(())
    }
}

/// Keeps the lower triangle (diagonal included), zeroing the rest.
fn mask_lower(a: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..=i.min(m - 1) {
            out.data_mut()[i * m + j] = a.at(i, j);
        }
    }
    out
}

/// Reverse-mode Cholesky: maps the adjoint of `L` to the adjoint of the input.
///
/// With `P = Φ(Lᵀ·L̄)` (lower mask, diagonal halved) and `S = L⁻ᵀ·P·L⁻¹`, the
/// adjoint of a *symmetric* perturbation is `S`. Because the forward op reads
/// only the lower triangle, the reported gradient folds the symmetric adjoint
/// onto the lower triangle: off-diagonal entries get `S_ij + S_ji`, diagonal
/// entries get `S_ii`.
fn cholesky_backward(l: &Tensor, lbar: &Tensor) -> Result<Tensor> {
    let n = l.rows();
    let mut p = matmul(&transpose(l), lbar)?;
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p.data_mut()[i * n + j] = 0.0;
            } else if j == i {
                p.data_mut()[i * n + j] *= 0.5;
            }
        }
    }
    // S = L⁻ᵀ·P·L⁻¹ computed as L⁻ᵀ·(L⁻ᵀ·Pᵀ)ᵀ.
    let inner = solve_lower_transpose(l, &transpose(&p))?;
    let s = solve_lower_transpose(l, &transpose(&inner))?;
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..i {
            out.data_mut()[i * n + j] = s.at(i, j) + s.at(j, i);
        }
        out.data_mut()[i * n + i] = s.at(i, i);
    }
    Ok(out)
}
