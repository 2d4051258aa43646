//! Dense 2-D tensors and a define-by-run reverse-mode tape.
//!
//! Every forward op records its inputs (and whatever activations its adjoint
//! needs) on the [`Tape`]; [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints additively. Broadcasting is limited to a row vector
//! added to every row, a column vector scaling every column, and a 1x1 scalar.
//!
//! Matrix products run row-parallel with a fixed per-row reduction order, so
//! results are bit-identical across thread counts.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

const PAR_MIN_ROWS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: (usize, usize),
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: (rows, cols),
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: (rows, cols),
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: (1, 1),
            data: vec![v],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self {
            shape: (rows, cols),
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::InvalidArgument {
                op: "from_rows",
                message: "ragged rows".into(),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.0
    }

    pub fn cols(&self) -> usize {
        self.shape.1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape.1 + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape.1;
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape.1;
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape;
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape;
        let (k2, n) = other.shape;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        let mut out = Tensor::zeros(m, n);
        if n == 0 {
            return Ok(out);
        }
        let body = |(i, row): (usize, &mut [f64])| {
            let a = &self.data[i * k..(i + 1) * k];
            for (p, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        };
        if m >= PAR_MIN_ROWS {
            out.data.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(body);
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    fn t_matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.shape;
        let n = other.shape.1;
        let mut out = Tensor::zeros(k, n);
        if n == 0 {
            return out;
        }
        let body = |(i, row): (usize, &mut [f64])| {
            for r in 0..m {
                let av = self.data[r * k + i];
                if av == 0.0 {
                    continue;
                }
                let b = &other.data[r * n..(r + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        };
        if m * k >= PAR_MIN_ROWS * 16 {
            out.data.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(body);
        }
        out
    }

    /// `self · otherᵀ`.
    fn matmul_t(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.shape;
        let n = other.shape.0;
        let mut out = Tensor::zeros(m, n);
        if n == 0 {
            return out;
        }
        let body = |(i, row): (usize, &mut [f64])| {
            let a = &self.data[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let b = &other.data[j * k..(j + 1) * k];
                *o = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        };
        if m >= PAR_MIN_ROWS {
            out.data.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(body);
        }
        out
    }
}

/// Partition of element indices into groups, stored CSR-style. Members of a
/// group are listed in ascending element order.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    group_of: Vec<usize>,
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Segments {
    pub fn new(group_of: Vec<usize>, n_groups: usize) -> Self {
        let mut counts = vec![0usize; n_groups + 1];
        for &g in &group_of {
            assert!(g < n_groups, "group index {g} out of range {n_groups}");
            counts[g + 1] += 1;
        }
        for i in 0..n_groups {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut members = vec![0; group_of.len()];
        for (i, &g) in group_of.iter().enumerate() {
            members[cursor[g]] = i;
            cursor[g] += 1;
        }
        Self {
            group_of,
            offsets,
            members,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_elements(&self) -> usize {
        self.group_of.len()
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.members[self.offsets[g]..self.offsets[g + 1]]
    }

    pub fn group_of(&self, i: usize) -> usize {
        self.group_of[i]
    }

    pub fn group_ids(&self) -> &[usize] {
        &self.group_of
    }
}

/// Typed edge list for one attention relation: messages flow from `source`
/// rows of the key/value matrices to `target` rows of the query matrix.
#[derive(Debug, Clone)]
pub struct AttentionEdges {
    sources: Vec<usize>,
    by_target: Segments,
}

impl AttentionEdges {
    pub fn new(edges: &[(usize, usize)], n_targets: usize) -> Self {
        Self {
            sources: edges.iter().map(|e| e.0).collect(),
            by_target: Segments::new(edges.iter().map(|e| e.1).collect(), n_targets),
        }
    }

    pub fn n_edges(&self) -> usize {
        self.sources.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    RowL2Distance(Var, Var),
    GroupedSoftmax {
        input: Var,
        segments: Arc<Segments>,
        scale: f64,
    },
    EdgeAttention {
        query: Var,
        key: Var,
        value: Var,
        edges: Arc<AttentionEdges>,
        heads: usize,
        weights: Tensor,
    },
    KlDiv {
        q: Var,
        target: Tensor,
        eps: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every trainable leaf, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` for constants.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape,
            rhs: b.shape,
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Bytes held by recorded values (saved activations included).
    pub fn value_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let extra = match &n.op {
                    Op::EdgeAttention { weights, .. } => weights.len(),
                    Op::KlDiv { target, .. } => target.len(),
                    _ => 0,
                };
                (n.value.len() + extra) * std::mem::size_of::<f64>()
            })
            .sum()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf; its gradient is returned by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// `x + row` with `row` of shape `[1 × cols]` added to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: xv.shape,
                rhs: rv.shape,
            });
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += rv.data[i % c];
        }
        self.push(out, Op::AddRow(x, row), &[x, row], "add_row")
    }

    /// `col[i] * x[i, j]` with `col` of shape `[rows × 1]`.
    pub fn mul_col(&mut self, col: Var, x: Var) -> Result<Var> {
        let (cv, xv) = (self.value(col), self.value(x));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_col",
                lhs: cv.shape,
                rhs: xv.shape,
            });
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v *= cv.data[i / c.max(1)];
        }
        self.push(out, Op::MulCol(col, x), &[col, x], "mul_col")
    }

    /// `x * s` with `s` a 1x1 tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape != (1, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.value(x).shape,
                rhs: sv.shape,
            });
        }
        let k = sv.data[0];
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::MulScalar(x, s), &[x, s], "mul_scalar")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), &[x], "scale")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x], "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x], "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x], "tanh")
    }

    /// Stacks `b` below `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_rows",
                lhs: av.shape,
                rhs: bv.shape,
            });
        }
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Tensor {
            shape: (av.rows() + bv.rows(), av.cols()),
            data,
        };
        self.push(out, Op::ConcatRows(a, b), &[a, b], "concat_rows")
    }

    /// Places `b` to the right of `a`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                lhs: av.shape,
                rhs: bv.shape,
            });
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            data.extend_from_slice(&av.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data[r * cb..(r + 1) * cb]);
        }
        let out = Tensor {
            shape: (av.rows(), ca + cb),
            data,
        };
        self.push(out, Op::ConcatCols(a, b), &[a, b], "concat_cols")
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                message: format!("row {bad} out of range for {:?}", xv.shape),
            });
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor {
            shape: (index.len(), c),
            data,
        };
        self.push(out, Op::GatherRows(x, index), &[x], "gather_rows")
    }

    /// `out[index[i]] += x[i]` into `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let xv = self.value(x);
        if index.len() != xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: xv.shape,
                rhs: (index.len(), 1),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n_out) {
            return Err(AutodiffError::InvalidArgument {
                op: "scatter_add_rows",
                message: format!("target row {bad} out of range {n_out}"),
            });
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(n_out, c);
        for (i, &t) in index.iter().enumerate() {
            for j in 0..c {
                out.data[t * c + j] += xv.data[i * c + j];
            }
        }
        self.push(out, Op::ScatterAddRows(x, index), &[x], "scatter_add_rows")
    }

    /// Per-row Euclidean distance `‖a_i − b_i‖₂`, shape `[rows × 1]`.
    pub fn row_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("row_l2_distance", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        let data = (0..av.rows())
            .map(|r| {
                av.data[r * c..(r + 1) * c]
                    .iter()
                    .zip(&bv.data[r * c..(r + 1) * c])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let out = Tensor {
            shape: (av.rows(), 1),
            data,
        };
        self.push(out, Op::RowL2Distance(a, b), &[a, b], "row_l2_distance")
    }

    /// Softmax of `scale · x` within each group, independently per column.
    /// Uses per-group max subtraction.
    pub fn grouped_softmax(&mut self, x: Var, segments: Arc<Segments>, scale: f64) -> Result<Var> {
        let xv = self.value(x);
        if segments.n_elements() != xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "grouped_softmax",
                lhs: xv.shape,
                rhs: (segments.n_elements(), 1),
            });
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), c);
        for g in 0..segments.n_groups() {
            let members = segments.group(g);
            for col in 0..c {
                let m = members
                    .iter()
                    .map(|&i| scale * xv.data[i * c + col])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for &i in members {
                    let e = (scale * xv.data[i * c + col] - m).exp();
                    out.data[i * c + col] = e;
                    z += e;
                }
                for &i in members {
                    out.data[i * c + col] /= z;
                }
            }
        }
        self.push(
            out,
            Op::GroupedSoftmax {
                input: x,
                segments,
                scale,
            },
            &[x],
            "grouped_softmax",
        )
    }

    /// `softmax(−cost / τ)` per group.
    pub fn grouped_neg_softmax(&mut self, costs: Var, segments: Arc<Segments>, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(AutodiffError::InvalidArgument {
                op: "grouped_neg_softmax",
                message: format!("temperature must be positive, got {tau}"),
            });
        }
        self.grouped_softmax(costs, segments, -1.0 / tau)
    }

    /// Multi-head scaled dot-product attention from each target row of
    /// `query` over its incoming edges. `key` and `value` are indexed by edge
    /// source. Targets without edges receive zero rows.
    pub fn edge_attention(
        &mut self,
        query: Var,
        key: Var,
        value: Var,
        edges: Arc<AttentionEdges>,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(query), self.value(key), self.value(value));
        let d = qv.cols();
        if kv.shape != vv.shape || kv.cols() != d {
            return Err(AutodiffError::ShapeMismatch {
                op: "edge_attention",
                lhs: qv.shape,
                rhs: kv.shape,
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "edge_attention",
                message: format!("dimension {d} not divisible into {heads} heads"),
            });
        }
        if edges.by_target.n_groups() != qv.rows() || edges.sources.iter().any(|&s| s >= kv.rows()) {
            return Err(AutodiffError::InvalidArgument {
                op: "edge_attention",
                message: "edge list does not match node counts".into(),
            });
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let per_target: Vec<(Vec<f64>, Vec<f64>)> = (0..qv.rows())
            .into_par_iter()
            .map(|t| {
                let members = edges.by_target.group(t);
                let q = qv.row(t);
                let mut alpha = vec![0.0; members.len() * heads];
                let mut out = vec![0.0; d];
                for h in 0..heads {
                    let span = h * dh..(h + 1) * dh;
                    let mut m = f64::NEG_INFINITY;
                    for (p, &e) in members.iter().enumerate() {
                        let k = &kv.row(edges.sources[e])[span.clone()];
                        let s: f64 = q[span.clone()].iter().zip(k).map(|(a, b)| a * b).sum();
                        alpha[p * heads + h] = s * inv_sqrt;
                        m = m.max(s * inv_sqrt);
                    }
                    let mut z = 0.0;
                    for p in 0..members.len() {
                        let e = (alpha[p * heads + h] - m).exp();
                        alpha[p * heads + h] = e;
                        z += e;
                    }
                    for (p, &e) in members.iter().enumerate() {
                        alpha[p * heads + h] /= z;
                        let a = alpha[p * heads + h];
                        let v = &vv.row(edges.sources[e])[span.clone()];
                        for (o, &x) in out[span.clone()].iter_mut().zip(v) {
                            *o += a * x;
                        }
                    }
                }
                (alpha, out)
            })
            .collect();

        let mut weights = Tensor::zeros(edges.n_edges(), heads);
        let mut out = Tensor::zeros(qv.rows(), d);
        for (t, (alpha, row)) in per_target.into_iter().enumerate() {
            for (p, &e) in edges.by_target.group(t).iter().enumerate() {
                weights.data[e * heads..(e + 1) * heads]
                    .copy_from_slice(&alpha[p * heads..(p + 1) * heads]);
            }
            out.data[t * d..(t + 1) * d].copy_from_slice(&row);
        }
        self.push(
            out,
            Op::EdgeAttention {
                query,
                key,
                value,
                edges,
                heads,
                weights,
            },
            &[query, key, value],
            "edge_attention",
        )
    }

    /// Attention coefficients `[edges × heads]` saved by an
    /// [`Tape::edge_attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::EdgeAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// `Σ_rows Σ_k P·ln(P / Q′)` with `Q′ = (Q + ε)/(1 + Kε)`; zero-mass
    /// target entries contribute nothing.
    pub fn kl_div(&mut self, target: Tensor, q: Var, eps: f64) -> Result<Var> {
        let qv = self.value(q);
        check_same("kl_div", &target, qv)?;
        if target.data.iter().any(|&p| p < 0.0) || !(eps >= 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op: "kl_div",
                message: "target must be nonnegative and eps >= 0".into(),
            });
        }
        let norm = 1.0 + qv.cols() as f64 * eps;
        let mut total = 0.0;
        for (&p, &qq) in target.data.iter().zip(&qv.data) {
            if p > 0.0 {
                let smoothed = (qq + eps) / norm;
                if !(smoothed > 0.0) {
                    return Err(AutodiffError::NonFinite("kl_div"));
                }
                total += p * (p / smoothed).ln();
            }
        }
        self.push(Tensor::scalar(total), Op::KlDiv { q, target, eps }, &[q], "kl_div")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape;
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
            } else if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    let c = g.cols();
                    let mut acc = Tensor::zeros(1, c);
                    for r in 0..g.rows() {
                        for j in 0..c {
                            acc.data[j] += g.data[r * c + j];
                        }
                    }
                    self.accumulate(grads, *row, acc);
                }
            }
            Op::MulCol(col, x) => {
                let (cv, xv) = (self.value(*col), self.value(*x));
                let c = xv.cols();
                if self.wants(*col) {
                    let data = (0..xv.rows())
                        .map(|r| {
                            (0..c)
                                .map(|j| g.data[r * c + j] * xv.data[r * c + j])
                                .sum()
                        })
                        .collect();
                    self.accumulate(
                        grads,
                        *col,
                        Tensor {
                            shape: cv.shape,
                            data,
                        },
                    );
                }
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for (i, v) in dx.data.iter_mut().enumerate() {
                        *v *= cv.data[i / c.max(1)];
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MulScalar(x, s) => {
                let k = self.value(*s).data[0];
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * k));
                }
                if self.wants(*s) {
                    let dot: f64 = g.data.iter().zip(&self.value(*x).data).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.map(|v| v * k)),
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, zip_map(g, out, |gv, s| gv * s * (1.0 - s)));
            }
            Op::Relu(x) => {
                self.accumulate(
                    grads,
                    *x,
                    zip_map(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, zip_map(g, out, |gv, t| gv * (1.0 - t * t)));
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                let (ga, gb) = g.data.split_at(split);
                let (sa, sb) = (self.value(*a).shape, self.value(*b).shape);
                self.accumulate(grads, *a, Tensor { shape: sa, data: ga.to_vec() });
                self.accumulate(grads, *b, Tensor { shape: sb, data: gb.to_vec() });
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor { shape: (rows, ca), data: ga });
                self.accumulate(grads, *b, Tensor { shape: (rows, cb), data: gb });
            }
            Op::GatherRows(x, index) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), c);
                for (i, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        dx.data[src * c + j] += g.data[i * c + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScatterAddRows(x, index) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(index.len() * c);
                for &t in index.iter() {
                    data.extend_from_slice(g.row(t));
                }
                self.accumulate(grads, *x, Tensor { shape: (index.len(), c), data });
            }
            Op::RowL2Distance(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let mut da = Tensor::zeros(av.rows(), c);
                for r in 0..av.rows() {
                    let d = out.data[r];
                    if d == 0.0 {
                        continue;
                    }
                    let k = g.data[r] / d;
                    for j in 0..c {
                        da.data[r * c + j] = k * (av.data[r * c + j] - bv.data[r * c + j]);
                    }
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::GroupedSoftmax {
                input,
                segments,
                scale,
            } => {
                let c = out.cols();
                let mut dx = Tensor::zeros(out.rows(), c);
                for grp in 0..segments.n_groups() {
                    let members = segments.group(grp);
                    for col in 0..c {
                        let dot: f64 = members
                            .iter()
                            .map(|&i| out.data[i * c + col] * g.data[i * c + col])
                            .sum();
                        for &i in members {
                            let w = out.data[i * c + col];
                            dx.data[i * c + col] = scale * w * (g.data[i * c + col] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::EdgeAttention {
                query,
                key,
                value,
                edges,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*query), self.value(*key), self.value(*value));
                let d = qv.cols();
                let heads = *heads;
                let dh = d / heads;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(qv.rows(), d);
                let mut dk = Tensor::zeros(kv.rows(), d);
                let mut dv = Tensor::zeros(vv.rows(), d);
                let mut dalpha = Vec::new();
                for t in 0..qv.rows() {
                    let members = edges.by_target.group(t);
                    if members.is_empty() {
                        continue;
                    }
                    let gt = g.row(t);
                    for h in 0..heads {
                        let span = h * dh..(h + 1) * dh;
                        dalpha.clear();
                        let mut mean = 0.0;
                        for &e in members {
                            let s = edges.sources[e];
                            let a = weights.data[e * heads + h];
                            let v = &vv.row(s)[span.clone()];
                            let da: f64 = gt[span.clone()].iter().zip(v).map(|(x, y)| x * y).sum();
                            dalpha.push(da);
                            mean += a * da;
                            for (j, &gj) in span.clone().zip(&gt[span.clone()]) {
                                dv.data[s * d + j] += a * gj;
                            }
                        }
                        for (p, &e) in members.iter().enumerate() {
                            let s = edges.sources[e];
                            let a = weights.data[e * heads + h];
                            let de = a * (dalpha[p] - mean) * inv_sqrt;
                            if de == 0.0 {
                                continue;
                            }
                            for j in span.clone() {
                                dq.data[t * d + j] += de * kv.data[s * d + j];
                                dk.data[s * d + j] += de * qv.data[t * d + j];
                            }
                        }
                    }
                }
                self.accumulate(grads, *query, dq);
                self.accumulate(grads, *key, dk);
                self.accumulate(grads, *value, dv);
            }
            Op::KlDiv { q, target, eps } => {
                let qv = self.value(*q);
                let gs = g.data[0];
                let dq = zip_map(target, qv, |p, qq| if p > 0.0 { -gs * p / (qq + eps) } else { 0.0 });
                self.accumulate(grads, *q, dq);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.data[0]));
            }
        }
    }
}
