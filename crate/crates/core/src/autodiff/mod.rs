//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products into per-node adjoints. Adjoints
//! live only for the duration of one backward call, so repeated passes
//! over the same tape start from zero and give identical results.

mod check;

pub use check::{five_point, finite_difference_check, finite_difference_check_filtered, op_gradient_errors, CHECKED_OPS};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }
}

/// Which row of an operand each output row reads.
#[derive(Clone, Debug, PartialEq)]
pub enum RowMap {
    /// Every row reads row 0.
    Broadcast,
    /// Row `i` reads row `rows[i] + offset`.
    Shifted { rows: Arc<[usize]>, offset: usize },
}

impl RowMap {
    /// Row `i` reads row `i`.
    pub fn identity(n: usize) -> Self {
        RowMap::Shifted {
            rows: (0..n).collect(),
            offset: 0,
        }
    }

    #[inline]
    pub fn source(&self, i: usize) -> usize {
        match self {
            RowMap::Broadcast => 0,
            RowMap::Shifted { rows, offset } => rows[i] + offset,
        }
    }

    fn fits(&self, out_rows: usize, src_rows: usize) -> bool {
        match self {
            RowMap::Broadcast => src_rows >= 1,
            RowMap::Shifted { rows, offset } => {
                rows.len() == out_rows && rows.iter().all(|r| r + offset < src_rows)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Operation kinds accepted by [`Tape::record`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Subtract,
    Scale(f64),
    Hadamard,
    Relu,
    Sigmoid,
    Exp,
    RowSoftmax,
    SumOfSquares,
    Concat(Axis),
    Slice {
        rows: (usize, usize),
        cols: (usize, usize),
    },
    Transpose,
    /// `m x n` plus a `1 x n` row broadcast over every row.
    AddRow,
    /// Rows selected by index, repeats allowed.
    GatherRows(Vec<usize>),
    /// `x m + f[map]` for `x: w x n`, `m: n x p`, `f: r x p`.
    StepRows(RowMap),
    /// `sum_i w_i sum_c (relu(lo - v) + relu(v - hi))^2` for `v: w x n`,
    /// with bound rows `lo[map(i)]`, `hi[map(i)]` and optional row weights.
    BoundPenalty {
        map: RowMap,
        weights: Option<Arc<[f64]>>,
    },
    /// `sum_i (v[i, col] - target[map(i), 0])^2`.
    ColumnError { col: usize, map: RowMap },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Subtract => "subtract",
            OpKind::Scale(_) => "scale",
            OpKind::Hadamard => "hadamard",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::SumOfSquares => "sum_of_squares",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Transpose => "transpose",
            OpKind::AddRow => "add_row",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::StepRows(_) => "step_rows",
            OpKind::BoundPenalty { .. } => "bound_penalty",
            OpKind::ColumnError { .. } => "column_error",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Apply(OpKind, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseMatrix,
    trainable: bool,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the trainable leaves after a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<usize, DenseMatrix>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for constants and for leaves
    /// the loss does not depend on.
    pub fn get(&self, leaf: Var) -> Option<&DenseMatrix> {
        self.by_leaf.get(&leaf.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &DenseMatrix)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: DenseMatrix, trainable: bool, needs_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            trainable,
            needs_grad,
        });
        Var { id, rows, cols }
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(Op::Leaf, value, true, true)
    }

    /// Leaf treated as a constant; never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(Op::Leaf, value, false, false)
    }

    pub fn leaf(&mut self, value: DenseMatrix, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.id].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.id].trainable
    }

    /// Records `kind` applied to `inputs` and computes its primal value.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Subtract
            | OpKind::Hadamard
            | OpKind::AddRow
            | OpKind::ColumnError { .. } => 2,
            OpKind::StepRows(_) | OpKind::BoundPenalty { .. } => 3,
            OpKind::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::dim(
                kind.name(),
                format!("expected {arity} inputs, got {}", inputs.len()),
            ));
        }
        let value = self.forward(&kind, inputs)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.id].needs_grad);
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(Op::Apply(kind, ids), value, false, needs_grad))
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<DenseMatrix> {
        let name = kind.name();
        let val = |i: usize| &self.nodes[inputs[i].id].value;
        let same_shape = || -> Result<()> {
            if val(0).shape() != val(1).shape() {
                return Err(Error::dim(
                    name,
                    format!("{:?} vs {:?}", val(0).shape(), val(1).shape()),
                ));
            }
            Ok(())
        };
        Ok(match kind {
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                if a.cols() != b.rows() {
                    return Err(Error::dim(
                        name,
                        format!("{:?} times {:?}", a.shape(), b.shape()),
                    ));
                }
                a.matmul(b)?
            }
            OpKind::Add => {
                same_shape()?;
                val(0).add(val(1))?
            }
            OpKind::Subtract => {
                same_shape()?;
                val(0).sub(val(1))?
            }
            OpKind::Hadamard => {
                same_shape()?;
                val(0).zip_map(val(1), name, |a, b| a * b)?
            }
            OpKind::AddRow => {
                let (a, r) = (val(0), val(1));
                if r.rows() != 1 || r.cols() != a.cols() {
                    return Err(Error::dim(
                        name,
                        format!("row {:?} does not broadcast over {:?}", r.shape(), a.shape()),
                    ));
                }
                let mut out = a.clone();
                for i in 0..out.rows() {
                    for (o, b) in out.row_slice_mut(i).iter_mut().zip(r.as_slice()) {
                        *o += b;
                    }
                }
                out
            }
            OpKind::Scale(s) => val(0).scale(*s),
            OpKind::Relu => val(0).map(|x| if x > 0.0 { x } else { 0.0 }),
            OpKind::Sigmoid => val(0).map(sigmoid),
            OpKind::Exp => val(0).map(f64::exp),
            OpKind::RowSoftmax => row_softmax(val(0)),
            OpKind::SumOfSquares => {
                DenseMatrix::scalar(val(0).as_slice().iter().map(|v| v * v).sum())
            }
            OpKind::Transpose => val(0).transpose(),
            OpKind::Slice { rows, cols } => {
                let a = val(0);
                if rows.0 > rows.1 || rows.1 > a.rows() || cols.0 > cols.1 || cols.1 > a.cols() {
                    return Err(Error::dim(
                        name,
                        format!("range {rows:?} x {cols:?} outside {:?}", a.shape()),
                    ));
                }
                slice(a, *rows, *cols)
            }
            OpKind::GatherRows(idx) => {
                let a = val(0);
                if let Some(bad) = idx.iter().find(|&&i| i >= a.rows()) {
                    return Err(Error::dim(
                        name,
                        format!("row {bad} outside {:?}", a.shape()),
                    ));
                }
                let mut data = Vec::with_capacity(idx.len() * a.cols());
                for &i in idx {
                    data.extend_from_slice(a.row_slice(i));
                }
                DenseMatrix::from_vec(idx.len(), a.cols(), data)?
            }
            OpKind::StepRows(map) => {
                let (x, m, f) = (val(0), val(1), val(2));
                if x.cols() != m.rows() || f.cols() != m.cols() || !map.fits(x.rows(), f.rows()) {
                    return Err(Error::dim(
                        name,
                        format!("x {:?}, m {:?}, f {:?}", x.shape(), m.shape(), f.shape()),
                    ));
                }
                step_rows_forward(x, m, f, map)
            }
            OpKind::BoundPenalty { map, weights } => {
                let (v, lo, hi) = (val(0), val(1), val(2));
                if lo.shape() != hi.shape()
                    || lo.cols() != v.cols()
                    || !map.fits(v.rows(), lo.rows())
                    || weights.as_ref().is_some_and(|w| w.len() != v.rows())
                {
                    return Err(Error::dim(
                        name,
                        format!("value {:?}, bounds {:?}/{:?}", v.shape(), lo.shape(), hi.shape()),
                    ));
                }
                let cols = v.cols();
                let mut total = 0.0;
                for (i, row) in v.as_slice().chunks_exact(cols).enumerate() {
                    let r = map.source(i);
                    let l = &lo.as_slice()[r * cols..(r + 1) * cols];
                    let h = &hi.as_slice()[r * cols..(r + 1) * cols];
                    let mut acc = 0.0;
                    for c in 0..cols {
                        let s = (l[c] - row[c]).max(0.0) + (row[c] - h[c]).max(0.0);
                        acc += s * s;
                    }
                    total += weights.as_ref().map_or(acc, |w| w[i] * acc);
                }
                DenseMatrix::scalar(total)
            }
            OpKind::ColumnError { col, map } => {
                let (v, t) = (val(0), val(1));
                if *col >= v.cols() || t.cols() != 1 || !map.fits(v.rows(), t.rows()) {
                    return Err(Error::dim(
                        name,
                        format!("value {:?}, column {col}, target {:?}", v.shape(), t.shape()),
                    ));
                }
                let total = (0..v.rows())
                    .map(|i| (v[(i, *col)] - t[(map.source(i), 0)]).powi(2))
                    .sum();
                DenseMatrix::scalar(total)
            }
            OpKind::Concat(axis) => {
                let parts: Vec<&DenseMatrix> = (0..inputs.len()).map(val).collect();
                concat(&parts, *axis).ok_or_else(|| {
                    Error::dim(
                        name,
                        format!(
                            "incompatible shapes {:?} along {axis:?}",
                            parts.iter().map(|p| p.shape()).collect::<Vec<_>>()
                        ),
                    )
                })?
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Subtract, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(OpKind::Scale(s), &[a])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Hadamard, &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(OpKind::AddRow, &[a, row])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Exp, &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::RowSoftmax, &[a])
    }

    pub fn sum_of_squares(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::SumOfSquares, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Transpose, &[a])
    }

    pub fn slice(&mut self, a: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        self.record(OpKind::Slice { rows, cols }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.record(OpKind::GatherRows(rows), &[a])
    }

    /// One batched affine step `x m + f[map]`.
    pub fn step_rows(&mut self, x: Var, m: Var, f: Var, map: RowMap) -> Result<Var> {
        self.record(OpKind::StepRows(map), &[x, m, f])
    }

    /// Weighted squared joint slack of `v` against mapped bound rows.
    pub fn bound_penalty(
        &mut self,
        v: Var,
        lower: Var,
        upper: Var,
        map: RowMap,
        weights: Option<Arc<[f64]>>,
    ) -> Result<Var> {
        self.record(OpKind::BoundPenalty { map, weights }, &[v, lower, upper])
    }

    /// Squared error of one column of `v` against mapped target rows.
    pub fn column_error(&mut self, v: Var, target: Var, col: usize, map: RowMap) -> Result<Var> {
        self.record(OpKind::ColumnError { col, map }, &[v, target])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        self.record(OpKind::Concat(axis), parts)
    }

    /// Reverse sweep from a scalar `loss`, returning adjoints of every
    /// trainable leaf the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        let mut adj: Vec<Option<DenseMatrix>> = Vec::with_capacity(loss.id + 1);
        adj.resize_with(loss.id + 1, || None);
        adj[loss.id] = Some(DenseMatrix::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Op::Apply(kind, inputs) = &node.op else {
                continue;
            };
            let Some(g) = adj[id].take() else {
                continue;
            };
            self.propagate(kind, inputs, &node.value, &g, &mut adj);
        }

        let mut by_leaf = BTreeMap::new();
        for (id, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                let node = &self.nodes[id];
                if node.trainable && matches!(node.op, Op::Leaf) {
                    by_leaf.insert(id, a);
                }
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn propagate(
        &self,
        kind: &OpKind,
        inputs: &[usize],
        out: &DenseMatrix,
        g: &DenseMatrix,
        adj: &mut [Option<DenseMatrix>],
    ) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[inputs[i]].needs_grad;
        let input = |i: usize| &nodes[inputs[i]].value;

        fn slot<'a>(adj: &'a mut [Option<DenseMatrix>], id: usize, shape: (usize, usize)) -> &'a mut DenseMatrix {
            adj[id].get_or_insert_with(|| DenseMatrix::zeros(shape.0, shape.1))
        }
        let acc = |adj: &mut [Option<DenseMatrix>], i: usize, f: &dyn Fn(usize, f64) -> f64| {
            let shape = nodes[inputs[i]].value.shape();
            let dst = slot(adj, inputs[i], shape);
            for (k, d) in dst.as_mut_slice().iter_mut().enumerate() {
                *d += f(k, g.as_slice()[k]);
            }
        };

        match kind {
            OpKind::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if wants(0) {
                    let dst = slot(adj, inputs[0], (m, k));
                    gemm_nt_acc(g.as_slice(), b.as_slice(), dst.as_mut_slice(), m, n, k);
                }
                if wants(1) {
                    let dst = slot(adj, inputs[1], (k, n));
                    gemm_tn_acc(a.as_slice(), g.as_slice(), dst.as_mut_slice(), m, k, n);
                }
            }
            OpKind::Add => {
                for i in 0..2 {
                    if wants(i) {
                        acc(adj, i, &|_, gv| gv);
                    }
                }
            }
            OpKind::Subtract => {
                if wants(0) {
                    acc(adj, 0, &|_, gv| gv);
                }
                if wants(1) {
                    acc(adj, 1, &|_, gv| -gv);
                }
            }
            OpKind::Hadamard => {
                let (a, b) = (input(0).as_slice(), input(1).as_slice());
                if wants(0) {
                    acc(adj, 0, &|k, gv| gv * b[k]);
                }
                if wants(1) {
                    acc(adj, 1, &|k, gv| gv * a[k]);
                }
            }
            OpKind::AddRow => {
                if wants(0) {
                    acc(adj, 0, &|_, gv| gv);
                }
                if wants(1) {
                    let cols = g.cols();
                    let dst = slot(adj, inputs[1], (1, cols));
                    for i in 0..g.rows() {
                        for (d, gv) in dst.as_mut_slice().iter_mut().zip(g.row_slice(i)) {
                            *d += gv;
                        }
                    }
                }
            }
            OpKind::Scale(s) => {
                let s = *s;
                acc(adj, 0, &|_, gv| gv * s);
            }
            OpKind::Relu => {
                let x = input(0).as_slice();
                acc(adj, 0, &|k, gv| if x[k] > 0.0 { gv } else { 0.0 });
            }
            OpKind::Sigmoid => {
                let y = out.as_slice();
                acc(adj, 0, &|k, gv| gv * y[k] * (1.0 - y[k]));
            }
            OpKind::Exp => {
                let y = out.as_slice();
                acc(adj, 0, &|k, gv| gv * y[k]);
            }
            OpKind::RowSoftmax => {
                let cols = out.cols();
                let dst = slot(adj, inputs[0], out.shape());
                for i in 0..out.rows() {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    let d = &mut dst.as_mut_slice()[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        d[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            OpKind::SumOfSquares => {
                let x = input(0).as_slice();
                let gv = g.as_slice()[0];
                let shape = input(0).shape();
                let dst = slot(adj, inputs[0], shape);
                for (d, xv) in dst.as_mut_slice().iter_mut().zip(x) {
                    *d += 2.0 * xv * gv;
                }
            }
            OpKind::Transpose => {
                let (r, c) = input(0).shape();
                let dst = slot(adj, inputs[0], (r, c));
                let d = dst.as_mut_slice();
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g.as_slice()[j * r + i];
                    }
                }
            }
            OpKind::Slice { rows, cols } => {
                let shape = input(0).shape();
                let dst = slot(adj, inputs[0], shape);
                let width = cols.1 - cols.0;
                for (gi, i) in (rows.0..rows.1).enumerate() {
                    let d = &mut dst.row_slice_mut(i)[cols.0..cols.1];
                    for (dv, gv) in d.iter_mut().zip(&g.as_slice()[gi * width..(gi + 1) * width]) {
                        *dv += gv;
                    }
                }
            }
            OpKind::GatherRows(idx) => {
                let shape = input(0).shape();
                let dst = slot(adj, inputs[0], shape);
                for (gi, &i) in idx.iter().enumerate() {
                    for (d, gv) in dst.row_slice_mut(i).iter_mut().zip(g.row_slice(gi)) {
                        *d += gv;
                    }
                }
            }
            OpKind::StepRows(map) => {
                let (x, m) = (input(0), input(1));
                let (w, n, p) = (x.rows(), x.cols(), m.cols());
                let gs = g.as_slice();
                if n == 4 && p == 4 {
                    if wants(0) {
                        let dst = slot(adj, inputs[0], (w, n)).as_mut_slice();
                        step_rows_back_fixed::<4>(x.as_slice(), m.as_slice(), gs, Some(dst), None);
                    }
                    if wants(1) {
                        let dst = slot(adj, inputs[1], (n, p)).as_mut_slice();
                        step_rows_back_fixed::<4>(x.as_slice(), m.as_slice(), gs, None, Some(dst));
                    }
                } else {
                    if wants(0) {
                        let dst = slot(adj, inputs[0], (w, n));
                        gemm_nt_acc(gs, m.as_slice(), dst.as_mut_slice(), w, p, n);
                    }
                    if wants(1) {
                        let dst = slot(adj, inputs[1], (n, p));
                        gemm_tn_acc(x.as_slice(), gs, dst.as_mut_slice(), w, n, p);
                    }
                }
                if wants(2) {
                    let shape = input(2).shape();
                    let dst = slot(adj, inputs[2], shape);
                    for (i, grow) in gs.chunks_exact(p).enumerate() {
                        for (d, gv) in dst.row_slice_mut(map.source(i)).iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
            OpKind::BoundPenalty { map, weights } => {
                let (v, lo, hi) = (input(0), input(1), input(2));
                let gv = g.as_slice()[0];
                let cols = v.cols();
                // d/dv of s^2 is -2s below the lower bound and +2s above the
                // upper one; each bound gets the negation on its active side.
                let mut dv = vec![0.0; v.rows() * cols];
                for (i, row) in v.as_slice().chunks_exact(cols).enumerate() {
                    let r = map.source(i);
                    let l = &lo.as_slice()[r * cols..(r + 1) * cols];
                    let h = &hi.as_slice()[r * cols..(r + 1) * cols];
                    let wi = 2.0 * gv * weights.as_ref().map_or(1.0, |w| w[i]);
                    for c in 0..cols {
                        dv[i * cols + c] = wi * ((row[c] - h[c]).max(0.0) - (l[c] - row[c]).max(0.0));
                    }
                }
                for k in [1, 2] {
                    if !wants(k) {
                        continue;
                    }
                    let shape = input(k).shape();
                    let dst = slot(adj, inputs[k], shape);
                    for (i, row) in v.as_slice().chunks_exact(cols).enumerate() {
                        let r = map.source(i);
                        for c in 0..cols {
                            let active = if k == 1 { row[c] < lo[(r, c)] } else { row[c] > hi[(r, c)] };
                            if active {
                                dst.row_slice_mut(r)[c] -= dv[i * cols + c];
                            }
                        }
                    }
                }
                if wants(0) {
                    let dst = slot(adj, inputs[0], v.shape()).as_mut_slice();
                    for (d, s) in dst.iter_mut().zip(&dv) {
                        *d += s;
                    }
                }
            }
            OpKind::ColumnError { col, map } => {
                let (v, t) = (input(0), input(1));
                let gv = g.as_slice()[0];
                if wants(0) {
                    let dst = slot(adj, inputs[0], v.shape());
                    for i in 0..v.rows() {
                        dst.row_slice_mut(i)[*col] += 2.0 * gv * (v[(i, *col)] - t[(map.source(i), 0)]);
                    }
                }
                if wants(1) {
                    let shape = t.shape();
                    let dst = slot(adj, inputs[1], shape);
                    for i in 0..v.rows() {
                        let r = map.source(i);
                        dst.row_slice_mut(r)[0] -= 2.0 * gv * (v[(i, *col)] - t[(r, 0)]);
                    }
                }
            }
            OpKind::Concat(axis) => {
                let mut offset = 0;
                for (idx, &id) in inputs.iter().enumerate() {
                    let shape = nodes[id].value.shape();
                    if wants(idx) {
                        let dst = slot(adj, id, shape);
                        match axis {
                            Axis::Rows => {
                                let n = shape.0 * shape.1;
                                let src = &g.as_slice()[offset * shape.1..offset * shape.1 + n];
                                for (d, s) in dst.as_mut_slice().iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                            Axis::Cols => {
                                for i in 0..shape.0 {
                                    let src = &g.row_slice(i)[offset..offset + shape.1];
                                    for (d, s) in dst.row_slice_mut(i).iter_mut().zip(src) {
                                        *d += s;
                                    }
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Rows => shape.0,
                        Axis::Cols => shape.1,
                    };
                }
            }
        }
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

/// Row-wise softmax with per-row max subtraction.
pub(crate) fn row_softmax(a: &DenseMatrix) -> DenseMatrix {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_slice_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn step_rows_forward(x: &DenseMatrix, m: &DenseMatrix, f: &DenseMatrix, map: &RowMap) -> DenseMatrix {
    let (w, n, p) = (x.rows(), x.cols(), m.cols());
    let mut out = vec![0.0; w * p];
    if n == 4 && p == 4 {
        step_rows_fixed::<4>(x.as_slice(), m.as_slice(), f.as_slice(), map, &mut out);
    } else {
        let ms = m.as_slice();
        for (i, (orow, xrow)) in out.chunks_exact_mut(p).zip(x.as_slice().chunks_exact(n)).enumerate() {
            orow.copy_from_slice(f.row_slice(map.source(i)));
            for (&xv, mrow) in xrow.iter().zip(ms.chunks_exact(p)) {
                for (o, mv) in orow.iter_mut().zip(mrow) {
                    *o += xv * mv;
                }
            }
        }
    }
    DenseMatrix::from_vec(w, p, out).expect("step shape")
}

fn step_rows_fixed<const K: usize>(xs: &[f64], ms: &[f64], fs: &[f64], map: &RowMap, out: &mut [f64]) {
    let mut mm = [[0.0; K]; K];
    for (k, row) in mm.iter_mut().enumerate() {
        row.copy_from_slice(&ms[k * K..(k + 1) * K]);
    }
    for (i, (orow, xrow)) in out.chunks_exact_mut(K).zip(xs.chunks_exact(K)).enumerate() {
        let r = map.source(i);
        let mut acc = [0.0; K];
        acc.copy_from_slice(&fs[r * K..(r + 1) * K]);
        for k in 0..K {
            let xv = xrow[k];
            for c in 0..K {
                acc[c] += xv * mm[k][c];
            }
        }
        orow.copy_from_slice(&acc);
    }
}

/// Adjoints of `x m + f[map]` for square `K x K` `m`.
fn step_rows_back_fixed<const K: usize>(
    xs: &[f64],
    ms: &[f64],
    gs: &[f64],
    dx: Option<&mut [f64]>,
    dm: Option<&mut [f64]>,
) {
    let mut mm = [[0.0; K]; K];
    for (k, row) in mm.iter_mut().enumerate() {
        row.copy_from_slice(&ms[k * K..(k + 1) * K]);
    }
    if let Some(dx) = dx {
        for (drow, grow) in dx.chunks_exact_mut(K).zip(gs.chunks_exact(K)) {
            for k in 0..K {
                let mut s = 0.0;
                for c in 0..K {
                    s += grow[c] * mm[k][c];
                }
                drow[k] += s;
            }
        }
    }
    if let Some(dm) = dm {
        let mut acc = [[0.0; K]; K];
        for (xrow, grow) in xs.chunks_exact(K).zip(gs.chunks_exact(K)) {
            for k in 0..K {
                for c in 0..K {
                    acc[k][c] += xrow[k] * grow[c];
                }
            }
        }
        for k in 0..K {
            for c in 0..K {
                dm[k * K + c] += acc[k][c];
            }
        }
    }
}

fn slice(a: &DenseMatrix, rows: (usize, usize), cols: (usize, usize)) -> DenseMatrix {
    let (r, c) = (rows.1 - rows.0, cols.1 - cols.0);
    let mut data = Vec::with_capacity(r * c);
    for i in rows.0..rows.1 {
        data.extend_from_slice(&a.row_slice(i)[cols.0..cols.1]);
    }
    DenseMatrix::from_vec(r, c, data).expect("slice shape")
}

fn concat(parts: &[&DenseMatrix], axis: Axis) -> Option<DenseMatrix> {
    let first = parts.first()?;
    match axis {
        Axis::Rows => {
            if parts.iter().any(|p| p.cols() != first.cols()) {
                return None;
            }
            let rows = parts.iter().map(|p| p.rows()).sum();
            let data = parts.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
            DenseMatrix::from_vec(rows, first.cols(), data).ok()
        }
        Axis::Cols => {
            if parts.iter().any(|p| p.rows() != first.rows()) {
                return None;
            }
            let cols = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(first.rows() * cols);
            for i in 0..first.rows() {
                for p in parts {
                    data.extend_from_slice(p.row_slice(i));
                }
            }
            DenseMatrix::from_vec(first.rows(), cols, data).ok()
        }
    }
}

/// `out += g * b^T` with `g: m x n`, `b: k x n`, `out: m x k`.
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a^T * g` with `a: m x k`, `g: m x n`, `out: k x n`.
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
