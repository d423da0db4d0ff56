//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive in evaluation order, so parents always
//! precede their children and the backward pass is a single reverse sweep.
//! Nodes created with [`Tape::constant`] (and everything computed only from
//! constants) are skipped by the backward pass.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::cholesky::Cholesky;
use super::matrix::gemm;
use super::DenseMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row routing for [`Tape::aggregate`]: `out[dst, block·c .. (block+1)·c] += src[row]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatePlan {
    pub out_rows: usize,
    pub blocks: usize,
    pub entries: Vec<(usize, usize, usize)>,
}

impl AggregatePlan {
    pub fn new(out_rows: usize, blocks: usize) -> Self {
        Self {
            out_rows,
            blocks,
            entries: Vec::new(),
        }
    }

    /// Adds `src` row into output row `dst`, column block `block`.
    pub fn push(&mut self, dst: usize, src: usize, block: usize) {
        debug_assert!(dst < self.out_rows && block < self.blocks);
        self.entries.push((dst, src, block));
    }

    pub fn apply(&self, src: &DenseMatrix) -> Result<DenseMatrix> {
        let c = src.cols();
        if let Some(&(_, row, _)) = self.entries.iter().find(|e| e.1 >= src.rows()) {
            return Err(Error::dim("aggregate", src.shape(), (row + 1, c)));
        }
        let mut out = DenseMatrix::zeros(self.out_rows, self.blocks * c);
        for &(dst, s, block) in &self.entries {
            let from = src.row(s);
            let to = &mut out.row_mut(dst)[block * c..(block + 1) * c];
            for (t, f) in to.iter_mut().zip(from) {
                *t += f;
            }
        }
        Ok(out)
    }

    fn apply_adjoint(&self, upstream: &DenseMatrix, src_rows: usize, into: &mut DenseMatrix) {
        let c = upstream.cols() / self.blocks.max(1);
        debug_assert_eq!(into.shape(), (src_rows, c));
        for &(dst, s, block) in &self.entries {
            let from = &upstream.row(dst)[block * c..(block + 1) * c];
            for (t, f) in into.row_mut(s).iter_mut().zip(from) {
                *t += f;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Relu(Var),
    Abs(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    GatherRows(Var, Rc<[usize]>),
    Aggregate(Var, Rc<AggregatePlan>),
    SumAll(Var),
    RowSum(Var),
    Frobenius(Var),
    GroupNorms(Var, usize),
    SpdSolve { a: Var, b: Var, factor: Cholesky },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulTn(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::Hadamard(a, b)
            | Op::SpdSolve { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::SliceRows(a, _)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::Aggregate(a, _)
            | Op::SumAll(a)
            | Op::RowSum(a)
            | Op::Frobenius(a)
            | Op::GroupNorms(a, _) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
    needs_grad: bool,
}

/// Single-owner record of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], one slot per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> DenseMatrix {
        match self.get(v) {
            Some(a) => a.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> DenseMatrix {
        match self.adjoints[v.0].take() {
            Some(a) => a,
            None => {
                let (r, c) = self.shapes[v.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
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

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn var(&mut self, value: DenseMatrix) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    fn push_raw(&mut self, op: Op, value: DenseMatrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(op, value, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_tn(self.value(b))?;
        Ok(self.push(Op::MatMulTn(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), value))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::dim("add_row_broadcast", av.shape(), bv.shape()));
        }
        let mut value = av.clone();
        let b = bv.row(0);
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(Op::AddRowBroadcast(a, bias), value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = DenseMatrix::hcat(&refs)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = DenseMatrix::vcat(&refs)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(Error::dim("slice_rows", av.shape(), (start, end)));
        }
        let value = av.slice_rows(start, end);
        Ok(self.push(Op::SliceRows(a, start), value))
    }

    /// Reinterprets the row-major data of `a` as `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshape(rows, cols)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Rc<[usize]>) -> Result<Var> {
        let av = self.value(a);
        let mut value = DenseMatrix::zeros(rows.len(), av.cols());
        for (k, &r) in rows.iter().enumerate() {
            if r >= av.rows() {
                return Err(Error::dim("gather_rows", av.shape(), (r + 1, av.cols())));
            }
            value.row_mut(k).copy_from_slice(av.row(r));
        }
        Ok(self.push(Op::GatherRows(a, rows), value))
    }

    pub fn aggregate(&mut self, a: Var, plan: Rc<AggregatePlan>) -> Result<Var> {
        let value = plan.apply(self.value(a))?;
        Ok(self.push(Op::Aggregate(a, plan), value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    /// `r × c → r × 1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<f64> = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        self.push(Op::RowSum(a), DenseMatrix::column(&sums))
    }

    pub fn frobenius(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).frobenius());
        self.push(Op::Frobenius(a), value)
    }

    /// `‖a − b‖_F`
    pub fn l2_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.frobenius(d))
    }

    /// L2 norm of each consecutive group of `group_rows` rows, as a column.
    pub fn group_norms(&mut self, a: Var, group_rows: usize) -> Result<Var> {
        let av = self.value(a);
        if group_rows == 0 || av.rows() % group_rows != 0 {
            return Err(Error::dim("group_norms", av.shape(), (group_rows, av.cols())));
        }
        let groups = av.rows() / group_rows;
        let cols = av.cols();
        let norms: Vec<f64> = (0..groups)
            .map(|g| {
                av.data()[g * group_rows * cols..(g + 1) * group_rows * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(self.push(Op::GroupNorms(a, group_rows), DenseMatrix::column(&norms)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Solves `a·x = b` for symmetric positive definite `a` via Cholesky.
    pub fn spd_solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != av.cols() || bv.rows() != av.rows() {
            return Err(Error::dim("spd_solve", av.shape(), bv.shape()));
        }
        let factor = Cholesky::factor(av)?;
        let value = factor.solve(bv)?;
        Ok(self.push(Op::SpdSolve { a, b, factor }, value))
    }

    /// Backward pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::dim("backward seed", shape, (1, 1)));
        }
        self.backward_with(output, DenseMatrix::scalar(1.0))
    }

    /// Backward pass from `output` with an explicit seed adjoint.
    pub fn backward_with(&self, output: Var, seed: DenseMatrix) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::dim("backward seed", self.shape(output), seed.shape()));
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = adj[idx].take() else { continue };
            self.propagate(idx, &up, &mut adj);
            adj[idx] = Some(up);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, up: &DenseMatrix, adj: &mut [Option<DenseMatrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    gemm_into(adj, *a, av.shape(), up, false, bv, true);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    gemm_into(adj, *b, bv.shape(), av, true, up, false);
                }
            }
            Op::MatMulTn(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = Aᵀ B: dA = B · dCᵀ, dB = A · dC
                if self.wants(*a) {
                    gemm_into(adj, *a, av.shape(), bv, false, up, true);
                }
                if self.wants(*b) {
                    gemm_into(adj, *b, bv.shape(), av, false, up, false);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, up, 1.0);
                }
                if self.wants(*b) {
                    accumulate(adj, *b, up, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, up, 1.0);
                }
                if self.wants(*b) {
                    accumulate(adj, *b, up, -1.0);
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                if self.wants(*a) {
                    accumulate(adj, *a, up, 1.0);
                }
                if self.wants(*bias) {
                    let mut g = DenseMatrix::zeros(1, up.cols());
                    for r in 0..up.rows() {
                        for (x, y) in g.row_mut(0).iter_mut().zip(up.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate_owned(adj, *bias, g);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(adj, *a, up, *s);
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    accumulate_owned(adj, *a, up.hadamard(self.value(*b)).expect("shape"));
                }
                if self.wants(*b) {
                    accumulate_owned(adj, *b, up.hadamard(self.value(*a)).expect("shape"));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let mut g = up.clone();
                    for (d, v) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate_owned(adj, *a, g);
                }
            }
            Op::Abs(a) => {
                if self.wants(*a) {
                    let mut g = up.clone();
                    for (d, x) in g.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    accumulate_owned(adj, *a, g);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.wants(*p) {
                        accumulate_owned(adj, *p, up.block(0, c0, r, c));
                    }
                    c0 += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let (r, _) = self.shape(*p);
                    if self.wants(*p) {
                        accumulate_owned(adj, *p, up.slice_rows(r0, r0 + r));
                    }
                    r0 += r;
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let slot = slot(adj, *a, self.shape(*a));
                    let mut tmp = DenseMatrix::zeros(slot.rows(), slot.cols());
                    tmp.set_block(*start, 0, up);
                    slot.axpy(1.0, &tmp).expect("shape");
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let (r, c) = self.shape(*a);
                    accumulate_owned(adj, *a, up.clone().reshape(r, c).expect("same length"));
                }
            }
            Op::GatherRows(a, rows) => {
                if self.wants(*a) {
                    let slot = slot(adj, *a, self.shape(*a));
                    for (k, &r) in rows.iter().enumerate() {
                        for (t, f) in slot.row_mut(r).iter_mut().zip(up.row(k)) {
                            *t += f;
                        }
                    }
                }
            }
            Op::Aggregate(a, plan) => {
                if self.wants(*a) {
                    let rows = self.shape(*a).0;
                    let slot = slot(adj, *a, self.shape(*a));
                    plan.apply_adjoint(up, rows, slot);
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    let (r, c) = self.shape(*a);
                    accumulate_owned(adj, *a, DenseMatrix::filled(r, c, up.data()[0]));
                }
            }
            Op::RowSum(a) => {
                if self.wants(*a) {
                    let (r, c) = self.shape(*a);
                    let g = DenseMatrix::from_fn(r, c, |i, _| up[(i, 0)]);
                    accumulate_owned(adj, *a, g);
                }
            }
            Op::Frobenius(a) => {
                if self.wants(*a) {
                    let norm = node.value.data()[0];
                    let (r, c) = self.shape(*a);
                    let g = if norm > 0.0 {
                        self.value(*a).scale(up.data()[0] / norm)
                    } else {
                        DenseMatrix::zeros(r, c)
                    };
                    accumulate_owned(adj, *a, g);
                }
            }
            Op::GroupNorms(a, group_rows) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut g = DenseMatrix::zeros(av.rows(), cols);
                    let span = group_rows * cols;
                    for (k, &norm) in node.value.data().iter().enumerate() {
                        if norm > 0.0 {
                            let s = up.data()[k] / norm;
                            let range = k * span..(k + 1) * span;
                            for (d, x) in g.data_mut()[range.clone()].iter_mut().zip(&av.data()[range]) {
                                *d = s * x;
                            }
                        }
                    }
                    accumulate_owned(adj, *a, g);
                }
            }
            Op::SpdSolve { a, b, factor } => {
                // X = A⁻¹B: dB = A⁻¹ dX, dA = −dB Xᵀ (symmetrized)
                let db = factor.solve(up).expect("factor shape");
                if self.wants(*a) {
                    let x = &node.value;
                    let full = db.matmul_nt(x).expect("shape");
                    let n = full.rows();
                    let da = DenseMatrix::from_fn(n, n, |i, j| -0.5 * (full[(i, j)] + full[(j, i)]));
                    accumulate_owned(adj, *a, da);
                }
                if self.wants(*b) {
                    accumulate_owned(adj, *b, db);
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<DenseMatrix>], v: Var, shape: (usize, usize)) -> &mut DenseMatrix {
    adj[v.0].get_or_insert_with(|| DenseMatrix::zeros(shape.0, shape.1))
}

fn accumulate(adj: &mut [Option<DenseMatrix>], v: Var, g: &DenseMatrix, alpha: f64) {
    match &mut adj[v.0] {
        Some(existing) => existing.axpy(alpha, g).expect("adjoint shape"),
        empty @ None => *empty = Some(if alpha == 1.0 { g.clone() } else { g.scale(alpha) }),
    }
}

fn accumulate_owned(adj: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.axpy(1.0, &g).expect("adjoint shape"),
        empty @ None => *empty = Some(g),
    }
}

fn gemm_into(
    adj: &mut [Option<DenseMatrix>],
    v: Var,
    shape: (usize, usize),
    a: &DenseMatrix,
    ta: bool,
    b: &DenseMatrix,
    tb: bool,
) {
    match &mut adj[v.0] {
        Some(existing) => gemm(1.0, a, ta, b, tb, 1.0, existing),
        empty @ None => {
            let mut out = DenseMatrix::zeros(shape.0, shape.1);
            gemm(1.0, a, ta, b, tb, 0.0, &mut out);
            *empty = Some(out);
        }
    }
}
