//! Eager reverse-mode automatic differentiation over row-major matrices.
//!
//! Every op computes its value immediately and records its parents; nodes
//! are appended in creation order, which is a valid topological order.
//! [`Graph::backward`] walks that order in reverse.

use std::sync::Arc;

use super::fastmath;
use super::params::{ParamId, ParamStore};
use super::tensor::{dense_forward, gemm_into, gemm_tn, MatView, Shape, Tensor};
use crate::error::{Error, Result};
use crate::parallel::{self, for_each_chunk_mut, rows_per_chunk};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Reduction axis: `Rows` collapses the row dimension (`r×c → 1×c`),
/// `Cols` collapses the column dimension (`r×c → r×1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Scale(f64),
    AddScalar(f64),
    Relu,
    /// `softplus(beta·x) / beta`
    Softplus(f64),
    Sigmoid,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    Square,
    Sqrt,
    /// Huber-style smooth L1 with the given threshold.
    SmoothL1(f64),
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Dense(NodeId, NodeId, NodeId, Option<Unary>),
    Unary(Unary, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Broadcast(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Arc<[Option<u32>]>),
    RowGroupSum(NodeId, usize),
    Sum(NodeId),
    SumAxis(NodeId),
    MaxAxis(NodeId, Vec<usize>),
    Softmax(NodeId),
    LayerNorm(NodeId, Axis, Vec<f64>),
    CumprodExclusive(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Dense(..) => "dense",
            Op::Unary(..) => "unary",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Broadcast(..) => "broadcast",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::RowGroupSum(..) => "row_group_sum",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MaxAxis(..) => "max_axis",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::CumprodExclusive(..) => "cumprod_exclusive",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Dense(x, w, b, _) => vec![*x, *w, *b],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Broadcast(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::RowGroupSum(a, _)
            | Op::Sum(a)
            | Op::SumAxis(a)
            | Op::MaxAxis(a, _)
            | Op::Softmax(a)
            | Op::LayerNorm(a, ..)
            | Op::CumprodExclusive(a) => vec![*a],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A computation graph holding values, gradients and the ops linking them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

#[inline(always)]
fn stable_sigmoid(x: f64) -> f64 {
    fastmath::sigmoid(x)
}

/// `softplus(beta·x)/beta`.
#[inline(always)]
fn softplus(x: f64, beta: f64) -> f64 {
    fastmath::softplus(x, beta)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    stable_sigmoid(x)
}

fn unary_forward(op: Unary, x: f64) -> f64 {
    match op {
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
        Unary::Relu => x.max(0.0),
        Unary::Softplus(beta) => softplus(x, beta),
        Unary::Sigmoid => stable_sigmoid(x),
        Unary::Exp => fastmath::exp(x),
        Unary::Log => x.ln(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::SmoothL1(th) => {
            let a = x.abs();
            if a < th {
                0.5 * x * x / th
            } else {
                a - 0.5 * th
            }
        }
        Unary::ClampMin(c) => {
            if x > c {
                x
            } else {
                c
            }
        }
    }
}

/// Local derivative `dy/dx` given input `x` and output `y`.
fn unary_derivative(op: Unary, x: f64, y: f64) -> f64 {
    match op {
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Softplus(beta) => fastmath::softplus_grad(x, beta),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::SmoothL1(th) => {
            if x.abs() < th {
                x / th
            } else if x > 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        Unary::ClampMin(c) => {
            if x > c {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Strides that read `t` as if broadcast to a larger shape.
fn bstrides(t: &Tensor) -> (usize, usize) {
    let rs = if t.rows() == 1 { 0 } else { t.cols() };
    let cs = if t.cols() == 1 { 0 } else { 1 };
    (rs, cs)
}

fn zip2(out: Shape, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync + Send) -> Tensor {
    let (ars, acs) = bstrides(a);
    let (brs, bcs) = bstrides(b);
    let (ad, bd) = (a.data(), b.data());
    let cols = out.cols;
    let mut data = vec![0.0; out.len()];
    let rpc = rows_per_chunk(cols);
    if ad.len() == out.len() && bd.len() == out.len() {
        for_each_chunk_mut(&mut data, rpc * cols, |ci, chunk| {
            let base = ci * rpc * cols;
            let end = base + chunk.len();
            for (v, (&x, &y)) in chunk.iter_mut().zip(ad[base..end].iter().zip(&bd[base..end])) {
                *v = f(x, y);
            }
        });
    } else {
        for_each_chunk_mut(&mut data, rpc * cols, |ci, chunk| {
            let r0 = ci * rpc;
            for (lr, row) in chunk.chunks_mut(cols).enumerate() {
                let r = r0 + lr;
                for (c, v) in row.iter_mut().enumerate() {
                    *v = f(ad[r * ars + c * acs], bd[r * brs + c * bcs]);
                }
            }
        });
    }
    Tensor::new(out.rows, out.cols, data)
}

fn zip3(
    out: Shape,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    f: impl Fn(f64, f64, f64) -> f64 + Sync + Send,
) -> Tensor {
    let (ars, acs) = bstrides(a);
    let (brs, bcs) = bstrides(b);
    let (crs, ccs) = bstrides(c);
    let (ad, bd, cd) = (a.data(), b.data(), c.data());
    let cols = out.cols;
    let rpc = rows_per_chunk(cols);
    let mut data = vec![0.0; out.len()];
    let n = out.len();
    if ad.len() == n && bd.len() == n && cd.len() == n {
        for_each_chunk_mut(&mut data, rpc * cols, |ci, chunk| {
            let base = ci * rpc * cols;
            let end = base + chunk.len();
            let it = ad[base..end].iter().zip(&bd[base..end]).zip(&cd[base..end]);
            for (v, ((&x, &y), &z)) in chunk.iter_mut().zip(it) {
                *v = f(x, y, z);
            }
        });
        return Tensor::new(out.rows, out.cols, data);
    }
    for_each_chunk_mut(&mut data, rpc * cols, |ci, chunk| {
        let r0 = ci * rpc;
        for (lr, row) in chunk.chunks_mut(cols).enumerate() {
            let r = r0 + lr;
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(
                    ad[r * ars + j * acs],
                    bd[r * brs + j * bcs],
                    cd[r * crs + j * ccs],
                );
            }
        }
    });
    Tensor::new(out.rows, out.cols, data)
}

/// Sum a full-size gradient down to a broadcast operand's shape.
fn reduce_to_shape(full: Tensor, target: Shape) -> Tensor {
    if full.shape() == target {
        return full;
    }
    let mut t = full;
    if target.rows == 1 && t.rows() > 1 {
        t = sum_rows(&t);
    }
    if target.cols == 1 && t.cols() > 1 {
        t = sum_cols(&t);
    }
    debug_assert_eq!(t.shape(), target);
    t
}

/// Column sums (`r×c → 1×c`) with fixed-block partial sums.
fn sum_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let block = rows_per_chunk(c);
    let blocks = r.div_ceil(block).max(1);
    let partials = parallel::map_indices(blocks, |b| {
        let mut acc = vec![0.0; c];
        for i in b * block..((b + 1) * block).min(r) {
            for (a, v) in acc.iter_mut().zip(t.row_slice(i)) {
                *a += v;
            }
        }
        acc
    });
    let mut out = vec![0.0; c];
    for p in partials {
        for (a, v) in out.iter_mut().zip(p) {
            *a += v;
        }
    }
    Tensor::new(1, c, out)
}

/// Row sums (`r×c → r×1`).
fn sum_cols(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r];
    let rpc = rows_per_chunk(c);
    for_each_chunk_mut(&mut out, rpc, |ci, chunk| {
        for (k, v) in chunk.iter_mut().enumerate() {
            *v = t.row_slice(ci * rpc + k).iter().sum();
        }
    });
    Tensor::new(r, 1, out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.push_shared(Arc::new(value), op, None)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, param: Option<ParamId>) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => param.is_some(),
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.index()].requires_grad),
        };
        let id = NodeId(u32::try_from(self.nodes.len()).expect("graph too large"));
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            param,
        });
        id
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.index()].requires_grad = true;
        id
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(Some(n)) = self.param_nodes.get(id.0) {
            return *n;
        }
        let trainable = store.is_trainable(id);
        let node = self.push_shared(store.shared(id), Op::Leaf, trainable.then_some(id));
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        self.param_nodes[id.0] = Some(node);
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.index()].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.index()].op.name()
    }

    /// Parents of a node; always smaller ids than the node itself.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.index()].op.parents()
    }

    /// Gradient of the last backward pass; zeros for nodes it did not reach.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.index()].grad {
            Some(g) => g.clone(),
            None => {
                let s = self.shape(id);
                Tensor::zeros(s.rows, s.cols)
            }
        }
    }

    pub fn grad_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.index()].grad.as_ref()
    }

    /// `(parameter, gradient)` for every trainable parameter used in the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Option<&Tensor>)> {
        self.param_nodes
            .iter()
            .enumerate()
            .filter_map(|(pid, n)| {
                let n = (*n)?;
                let node = &self.nodes[n.index()];
                node.param.map(|_| (ParamId(pid), node.grad.as_ref()))
            })
            .collect()
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a),
            rhs: self.shape(b),
        }
    }

    // ----- elementwise binary ------------------------------------------------

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let name = Op::Binary(kind, a, b).name();
        let rows = broadcast_dim(sa.rows, sb.rows).ok_or_else(|| self.shape_err(name, a, b))?;
        let cols = broadcast_dim(sa.cols, sb.cols).ok_or_else(|| self.shape_err(name, a, b))?;
        let out = Shape::new(rows, cols);
        let (va, vb) = (self.value(a), self.value(b));
        let value = match kind {
            Binary::Add => zip2(out, va, vb, |x, y| x + y),
            Binary::Sub => zip2(out, va, vb, |x, y| x - y),
            Binary::Mul => zip2(out, va, vb, |x, y| x * y),
            Binary::Div => zip2(out, va, vb, |x, y| x / y),
        };
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    /// Elementwise `a + b` with row/column/scalar broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; sa.rows * sb.cols];
        gemm_into(
            MatView::of(self.value(a)),
            MatView::of(self.value(b)),
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(sa.rows, sb.cols, out), Op::MatMul(a, b)))
    }

    /// Fused layer `act(x·w + b)` with `b: 1×n`. Computed in row blocks so
    /// the pre-activation never leaves cache; `act` is `Relu`, `Softplus`
    /// or `None` for an affine layer.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId, act: Option<Unary>) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.cols != sw.rows {
            return Err(self.shape_err("dense", x, w));
        }
        if sb.rows != 1 || sb.cols != sw.cols {
            return Err(self.shape_err("dense", w, b));
        }
        if !matches!(act, None | Some(Unary::Relu) | Some(Unary::Softplus(_))) {
            return Err(Error::invalid(format!("dense supports relu and softplus, got {act:?}")));
        }
        let out = dense_forward(self.value(x), self.value(w), self.value(b), move |chunk: &mut [f64]| match act {
            Some(Unary::Relu) => chunk.iter_mut().for_each(|v| *v = v.max(0.0)),
            Some(Unary::Softplus(beta)) => fastmath::softplus_slice(chunk, beta),
            _ => {}
        });
        Ok(self.push(out, Op::Dense(x, w, b, act)))
    }

    // ----- elementwise unary -------------------------------------------------

    pub fn unary(&mut self, op: Unary, a: NodeId) -> NodeId {
        let x = self.value(a);
        let value = match op {
            Unary::Softplus(beta) => {
                let mut t = x.clone();
                for_each_chunk_mut(t.data_mut(), parallel::ELEM_CHUNK, |_, c| fastmath::softplus_slice(c, beta));
                t
            }
            Unary::Sigmoid => {
                let mut t = x.clone();
                for_each_chunk_mut(t.data_mut(), parallel::ELEM_CHUNK, |_, c| fastmath::sigmoid_slice(c));
                t
            }
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Scale(c) => x.map(move |v| c * v),
            _ => x.map(move |v| unary_forward(op, v)),
        };
        self.push(value, Op::Unary(op, a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Unary::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Unary::AddScalar(c), a)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Relu, a)
    }

    pub fn softplus(&mut self, a: NodeId, beta: f64) -> NodeId {
        self.unary(Unary::Softplus(beta), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Log, a)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sin, a)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Cos, a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sqrt, a)
    }

    pub fn smooth_l1(&mut self, a: NodeId, threshold: f64) -> NodeId {
        self.unary(Unary::SmoothL1(threshold), a)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(Unary::ClampMin(floor), a)
    }

    // ----- shape ops ---------------------------------------------------------

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Reinterpret the row-major payload with a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: s,
                rhs: Shape::new(rows, cols),
            });
        }
        let v = self.value(a).clone().reshaped(rows, cols);
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Explicit broadcast to `rows × cols`.
    pub fn broadcast(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let s = self.shape(a);
        let target = Shape::new(rows, cols);
        let ok = (s.rows == rows || s.rows == 1) && (s.cols == cols || s.cols == 1);
        if !ok {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: s,
                rhs: target,
            });
        }
        let zero = Tensor::scalar(0.0);
        let v = zip2(target, self.value(a), &zero, |x, _| x);
        Ok(self.push(v, Op::Broadcast(a)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of zero tensors"))?;
        let rows = self.shape(first).rows;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).rows != rows) {
            return Err(self.shape_err("concat_cols", first, *bad));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).cols).sum();
        let mut data = vec![0.0; rows * cols];
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let rpc = rows_per_chunk(cols);
        for_each_chunk_mut(&mut data, rpc * cols, |ci, chunk| {
            for (lr, row) in chunk.chunks_mut(cols).enumerate() {
                let r = ci * rpc + lr;
                let mut off = 0;
                for v in &values {
                    let src = v.row_slice(r);
                    row[off..off + src.len()].copy_from_slice(src);
                    off += src.len();
                }
            }
        });
        Ok(self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of zero tensors"))?;
        let cols = self.shape(first).cols;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).cols != cols) {
            return Err(self.shape_err("concat_rows", first, *bad));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
            rows += self.shape(*p).rows;
        }
        Ok(self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s.cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: s,
                rhs: Shape::new(s.rows, start + len),
            });
        }
        let src = self.value(a);
        let v = Tensor::from_fn(s.rows, len, |r, c| src.get(r, start + c));
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s.rows {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: s,
                rhs: Shape::new(start + len, s.cols),
            });
        }
        let d = &self.value(a).data()[start * s.cols..(start + len) * s.cols];
        let v = Tensor::new(len, s.cols, d.to_vec());
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    /// Row `i` of the output is row `index[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: NodeId, index: Arc<[Option<u32>]>) -> Result<NodeId> {
        let s = self.shape(a);
        if let Some(bad) = index.iter().flatten().find(|&&i| i as usize >= s.rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: s,
                rhs: Shape::new(*bad as usize + 1, s.cols),
            });
        }
        let cols = s.cols;
        let src = self.value(a);
        let mut data = vec![0.0; index.len() * cols];
        let rpc = rows_per_chunk(cols);
        for_each_chunk_mut(&mut data, rpc * cols, |ci, chunk| {
            for (lr, row) in chunk.chunks_mut(cols).enumerate() {
                if let Some(i) = index[ci * rpc + lr] {
                    row.copy_from_slice(src.row_slice(i as usize));
                }
            }
        });
        let n = index.len();
        Ok(self.push(Tensor::new(n, cols, data), Op::GatherRows(a, index)))
    }

    /// Sum consecutive groups of `group` rows: `(g·n)×c → n×c`.
    pub fn row_group_sum(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if group == 0 || s.rows % group != 0 {
            return Err(Error::Shape {
                op: "row_group_sum",
                lhs: s,
                rhs: Shape::new(group, s.cols),
            });
        }
        let n = s.rows / group;
        let src = self.value(a);
        let mut data = vec![0.0; n * s.cols];
        let rpc = rows_per_chunk(s.cols * group);
        for_each_chunk_mut(&mut data, rpc * s.cols, |ci, chunk| {
            for (lr, row) in chunk.chunks_mut(s.cols).enumerate() {
                let q = ci * rpc + lr;
                for r in q * group..(q + 1) * group {
                    for (o, v) in row.iter_mut().zip(src.row_slice(r)) {
                        *o += v;
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(n, s.cols, data), Op::RowGroupSum(a, group)))
    }

    // ----- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum();
        self.push(Tensor::scalar(v), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.shape(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let v = match axis {
            Axis::Rows => sum_rows(self.value(a)),
            Axis::Cols => sum_cols(self.value(a)),
        };
        self.push(v, Op::SumAxis(a))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let s = self.shape(a);
        let n = match axis {
            Axis::Rows => s.rows,
            Axis::Cols => s.cols,
        }
        .max(1) as f64;
        let t = self.sum_axis(a, axis);
        self.scale(t, 1.0 / n)
    }

    /// Maximum along an axis; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let (outer, inner) = match axis {
            Axis::Rows => (c, r),
            Axis::Cols => (r, c),
        };
        let at = |o: usize, i: usize| match axis {
            Axis::Rows => i * c + o,
            Axis::Cols => o * c + i,
        };
        let mut vals = Vec::with_capacity(outer);
        let mut arg = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = 0;
            for i in 1..inner {
                if t.data()[at(o, i)] > t.data()[at(o, best)] {
                    best = i;
                }
            }
            vals.push(t.data()[at(o, best)]);
            arg.push(at(o, best));
        }
        let v = match axis {
            Axis::Rows => Tensor::new(1, c, vals),
            Axis::Cols => Tensor::new(r, 1, vals),
        };
        self.push(v, Op::MaxAxis(a, arg))
    }

    // ----- composite kernels -------------------------------------------------

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        let rpc = rows_per_chunk(c);
        for_each_chunk_mut(&mut data, rpc * c.max(1), |_, chunk| {
            for row in chunk.chunks_mut(c.max(1)) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = fastmath::exp(*v - m);
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        });
        self.push(Tensor::new(r, c, data), Op::Softmax(a))
    }

    /// Normalize to zero mean and unit variance along `axis` (no affine).
    /// `Axis::Cols` normalizes each row; `Axis::Rows` normalizes each column.
    pub fn layer_norm(&mut self, a: NodeId, axis: Axis, eps: f64) -> NodeId {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        let inv_std = match axis {
            Axis::Cols => {
                let mut inv = vec![0.0; r];
                for (row, iv) in out.chunks_mut(c.max(1)).zip(inv.iter_mut()) {
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    *iv = 1.0 / (var + eps).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mean) * *iv;
                    }
                }
                inv
            }
            Axis::Rows => {
                let mut inv = vec![0.0; c];
                let n = r as f64;
                for j in 0..c {
                    let mean = (0..r).map(|i| out[i * c + j]).sum::<f64>() / n;
                    let var = (0..r)
                        .map(|i| (out[i * c + j] - mean).powi(2))
                        .sum::<f64>()
                        / n;
                    inv[j] = 1.0 / (var + eps).sqrt();
                    for i in 0..r {
                        out[i * c + j] = (out[i * c + j] - mean) * inv[j];
                    }
                }
                inv
            }
        };
        self.push(Tensor::new(r, c, out), Op::LayerNorm(a, axis, inv_std))
    }

    /// Exclusive cumulative product along each row: `y[i][0] = 1`,
    /// `y[i][j] = Π_{k<j} x[i][k]`.
    pub fn cumprod_exclusive(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        let rpc = rows_per_chunk(c);
        for_each_chunk_mut(&mut out, rpc * c.max(1), |ci, chunk| {
            for (lr, row) in chunk.chunks_mut(c.max(1)).enumerate() {
                let src = t.row_slice(ci * rpc + lr);
                let mut p = 1.0;
                for (o, x) in row.iter_mut().zip(src) {
                    *o = p;
                    p *= x;
                }
            }
        });
        self.push(Tensor::new(r, c, out), Op::CumprodExclusive(a))
    }

    // ----- backward ----------------------------------------------------------

    /// Populate gradients of every ancestor of the scalar `loss`.
    /// Gradients from an earlier call are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let s = self.shape(loss);
        if !s.is_scalar() {
            return Err(Error::NonScalarLoss(s));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.index()].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.index()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (p, t) in contributions {
                let node = &mut self.nodes[p.index()];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[idx];
        let y = &*node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let sh = g.shape();
                if self.wants(*a) {
                    let full = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => zip2(sh, g, vb, |gv, bv| gv * bv),
                        Binary::Div => zip2(sh, g, vb, |gv, bv| gv / bv),
                    };
                    out.push((*a, reduce_to_shape(full, va.shape())));
                }
                if self.wants(*b) {
                    let full = match kind {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.map(|v| -v),
                        Binary::Mul => zip2(sh, g, va, |gv, av| gv * av),
                        Binary::Div => zip3(sh, g, va, vb, |gv, av, bv| -gv * av / (bv * bv)),
                    };
                    out.push((*b, reduce_to_shape(full, vb.shape())));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut d = vec![0.0; va.len()];
                    gemm_into(MatView::of(g), MatView::of(vb).t(), &mut d, false);
                    out.push((*a, Tensor::new(va.rows(), va.cols(), d)));
                }
                if self.wants(*b) {
                    out.push((*b, gemm_tn(va, g)));
                }
            }
            Op::Dense(x, w, b, act) => {
                let owned;
                let gz = match *act {
                    Some(Unary::Relu) => {
                        owned = zip2(g.shape(), g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 });
                        &owned
                    }
                    Some(Unary::Softplus(beta)) => {
                        let (gd, yd) = (g.data(), y.data());
                        let mut d = vec![0.0; gd.len()];
                        for_each_chunk_mut(&mut d, parallel::ELEM_CHUNK, |ci, chunk| {
                            let lo = ci * parallel::ELEM_CHUNK;
                            let hi = lo + chunk.len();
                            fastmath::softplus_backward_slice(&gd[lo..hi], &yd[lo..hi], chunk, beta);
                        });
                        owned = Tensor::new(g.rows(), g.cols(), d);
                        &owned
                    }
                    _ => g,
                };
                if self.wants(*x) {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let mut d = vec![0.0; vx.len()];
                    gemm_into(MatView::of(gz), MatView::of(vw).t(), &mut d, false);
                    out.push((*x, Tensor::new(vx.rows(), vx.cols(), d)));
                }
                if self.wants(*w) {
                    out.push((*w, gemm_tn(self.value(*x), gz)));
                }
                if self.wants(*b) {
                    out.push((*b, sum_rows(gz)));
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let op = *op;
                let d = match op {
                    Unary::Softplus(beta) => zip3(g.shape(), g, x, y, move |gv, xv, _| {
                        gv * fastmath::softplus_grad(xv, beta)
                    }),
                    Unary::Sigmoid => zip3(g.shape(), g, x, y, |gv, _, yv| gv * yv * (1.0 - yv)),
                    Unary::Relu => zip3(g.shape(), g, x, y, |gv, xv, _| if xv > 0.0 { gv } else { 0.0 }),
                    _ => zip3(g.shape(), g, x, y, move |gv, xv, yv| gv * unary_derivative(op, xv, yv)),
                };
                out.push((*a, d));
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::Reshape(a) => {
                let s = self.shape(*a);
                out.push((*a, g.clone().reshaped(s.rows, s.cols)));
            }
            Op::Broadcast(a) => out.push((*a, reduce_to_shape(g.clone(), self.shape(*a)))),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.shape(*p).cols;
                    if self.wants(*p) {
                        let o = off;
                        out.push((*p, Tensor::from_fn(g.rows(), c, |r, j| g.get(r, o + j))));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let cols = g.cols();
                for p in parts {
                    let r = self.shape(*p).rows;
                    if self.wants(*p) {
                        let d = g.data()[off * cols..(off + r) * cols].to_vec();
                        out.push((*p, Tensor::new(r, cols, d)));
                    }
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.rows, s.cols);
                for r in 0..g.rows() {
                    for j in 0..g.cols() {
                        d.set(r, start + j, g.get(r, j));
                    }
                }
                out.push((*a, d));
            }
            Op::SliceRows(a, start) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.rows, s.cols);
                d.data_mut()[start * s.cols..start * s.cols + g.len()].copy_from_slice(g.data());
                out.push((*a, d));
            }
            Op::GatherRows(a, index) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.rows, s.cols);
                let cols = s.cols;
                let dd = d.data_mut();
                for (r, i) in index.iter().enumerate() {
                    if let Some(i) = i {
                        let dst = &mut dd[*i as usize * cols..(*i as usize + 1) * cols];
                        for (o, v) in dst.iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                }
                out.push((*a, d));
            }
            Op::RowGroupSum(a, group) => {
                let s = self.shape(*a);
                let group = *group;
                let mut d = vec![0.0; s.len()];
                let rpc = rows_per_chunk(s.cols);
                for_each_chunk_mut(&mut d, rpc * s.cols, |ci, chunk| {
                    for (lr, row) in chunk.chunks_mut(s.cols).enumerate() {
                        row.copy_from_slice(g.row_slice((ci * rpc + lr) / group));
                    }
                });
                out.push((*a, Tensor::new(s.rows, s.cols, d)));
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                out.push((*a, Tensor::full(s.rows, s.cols, g.item())));
            }
            Op::SumAxis(a) => {
                let s = self.shape(*a);
                let zero = Tensor::scalar(0.0);
                out.push((*a, zip2(s, g, &zero, |v, _| v)));
            }
            Op::MaxAxis(a, arg) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.rows, s.cols);
                for (k, &pos) in arg.iter().enumerate() {
                    d.data_mut()[pos] += g.data()[k];
                }
                out.push((*a, d));
            }
            Op::Softmax(a) => {
                let c = y.cols().max(1);
                let mut d = vec![0.0; y.len()];
                let rpc = rows_per_chunk(c);
                for_each_chunk_mut(&mut d, rpc * c, |ci, chunk| {
                    for (lr, row) in chunk.chunks_mut(c).enumerate() {
                        let r = ci * rpc + lr;
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in row.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                });
                out.push((*a, Tensor::new(y.rows(), y.cols(), d)));
            }
            Op::LayerNorm(a, axis, inv_std) => {
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; r * c];
                match axis {
                    Axis::Cols => {
                        for i in 0..r {
                            let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                            let n = c as f64;
                            let mg = gr.iter().sum::<f64>() / n;
                            let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                            for j in 0..c {
                                d[i * c + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                            }
                        }
                    }
                    Axis::Rows => {
                        let n = r as f64;
                        for j in 0..c {
                            let mg = (0..r).map(|i| g.get(i, j)).sum::<f64>() / n;
                            let mgy = (0..r).map(|i| g.get(i, j) * y.get(i, j)).sum::<f64>() / n;
                            for i in 0..r {
                                d[i * c + j] = inv_std[j] * (g.get(i, j) - mg - y.get(i, j) * mgy);
                            }
                        }
                    }
                }
                out.push((*a, Tensor::new(r, c, d)));
            }
            Op::CumprodExclusive(a) => {
                let x = self.value(*a);
                let c = x.cols().max(1);
                let mut d = vec![0.0; x.len()];
                let rpc = rows_per_chunk(c);
                for_each_chunk_mut(&mut d, rpc * c, |ci, chunk| {
                    for (lr, row) in chunk.chunks_mut(c).enumerate() {
                        let r = ci * rpc + lr;
                        let (xr, yr, gr) = (x.row_slice(r), y.row_slice(r), g.row_slice(r));
                        // s = Σ_{j>i} g_j Π_{i<k<j} x_k, accumulated right to left.
                        let mut s = 0.0;
                        for i in (0..row.len()).rev() {
                            row[i] = yr[i] * s;
                            s = gr[i] + xr[i] * s;
                        }
                    }
                });
                out.push((*a, Tensor::new(x.rows(), x.cols(), d)));
            }
        }
        out
    }
}

