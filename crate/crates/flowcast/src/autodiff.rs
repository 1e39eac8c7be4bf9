//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every tensor is a node in an implicit acyclic graph: applying a primitive
//! records the inputs when any of them requires gradients, and
//! [`Tensor::backward`] replays the graph in reverse topological order,
//! visiting each node exactly once. Gradients accumulate additively across
//! fan-out, and across repeated `backward` calls until [`Tensor::zero_grad`]
//! is called.
//!
//! Shapes are `(rows, cols)`; a scalar is `(1, 1)` and a column vector is
//! `(n, 1)`. Broadcasting is deliberately restricted to scalar-vs-tensor and
//! exact-shape so every Jacobian rule stays auditable. All storage is 64-bit.
//!
//! Graph construction and backward are single-threaded per graph; distinct
//! graphs may live on distinct threads.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Primitive kinds recorded on the graph. Variants carry only the metadata
/// needed to replay the vector-Jacobian product; values are read from the
/// parent nodes.
#[derive(Debug, Clone)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Sqrt,
    Matmul,
    BiasAdd,
    SoftmaxRows,
    CumsumRows,
    RowSum,
    Sum,
    Mean,
    SliceCols { start: usize, len: usize },
    ConcatCols,
    SelectPerRow { indices: Vec<usize> },
    PermuteCols { perm: Vec<usize> },
    WhereMask { mask: Vec<bool> },
}

struct Inner {
    id: u64,
    rows: usize,
    cols: usize,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    op: Option<Op>,
}

/// Dense tensor participating in a reverse-mode gradient graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &(self.inner.rows, self.inner.cols))
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("[{}x{}]", t.rows(), t.cols())
}

impl Tensor {
    fn build(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        op: Option<Op>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                rows,
                cols,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                op,
            }),
        }
    }

    /// Constant node: never records dependencies, never receives gradients.
    pub fn constant(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::build(rows, cols, data, false, Vec::new(), None)
    }

    /// Trainable leaf; gradients accumulate here after `backward`.
    pub fn leaf(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::build(rows, cols, data, true, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(1, 1, vec![v])
    }

    /// Result of a primitive. Dependencies are recorded only when some input
    /// requires gradients; otherwise the node degenerates to a constant.
    fn from_op(rows: usize, cols: usize, data: Vec<f64>, parents: Vec<Tensor>, op: Op) -> Tensor {
        let requires = parents.iter().any(|p| p.inner.requires_grad);
        if requires {
            Tensor::build(rows, cols, data, true, parents, Some(op))
        } else {
            Tensor::build(rows, cols, data, false, Vec::new(), None)
        }
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    pub fn numel(&self) -> usize {
        self.inner.rows * self.inner.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Snapshot of the current values.
    pub fn data(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        self.inner.data.borrow()[0]
    }

    /// Mutate the stored values in place (parameter updates). The graph holds
    /// values by node, so this must only be used on leaves between graph
    /// constructions.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn set_data(&self, values: &[f64]) {
        assert_eq!(values.len(), self.numel(), "set_data length mismatch");
        self.inner.data.borrow_mut().copy_from_slice(values);
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    // ----- elementwise primitives -------------------------------------------------

    fn binary(&self, other: &Tensor, op: Op) -> Result<Tensor> {
        let (a, b) = (self, other);
        let (rows, cols) = if a.shape() == b.shape() {
            a.shape()
        } else if a.is_scalar() {
            b.shape()
        } else if b.is_scalar() {
            a.shape()
        } else {
            return Err(Error::Shape(format!(
                "{:?} on shapes {} vs {}",
                op,
                shape_str(a),
                shape_str(b)
            )));
        };
        let av = a.inner.data.borrow();
        let bv = b.inner.data.borrow();
        let n = rows * cols;
        let mut out = Vec::with_capacity(n);
        let fetch = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        for i in 0..n {
            let (x, y) = (fetch(&av, i), fetch(&bv, i));
            out.push(match op {
                Op::Add => x + y,
                Op::Sub => x - y,
                Op::Mul => x * y,
                Op::Div => x / y,
                _ => unreachable!(),
            });
        }
        drop(av);
        drop(bv);
        Ok(Tensor::from_op(rows, cols, out, vec![a.clone(), b.clone()], op))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let out = self.inner.data.borrow().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.rows(), self.cols(), out, vec![self.clone()], op)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(Op::Softplus, softplus)
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.inner.data.borrow().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive input".into()));
        }
        Ok(self.unary(Op::Log, f64::ln))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.inner.data.borrow().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("sqrt of negative input".into()));
        }
        Ok(self.unary(Op::Sqrt, f64::sqrt))
    }

    // ----- matrix primitives ------------------------------------------------------

    /// `[n x k] . [k x m]` matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.rows() {
            return Err(Error::Shape(format!(
                "matmul on shapes {} vs {}",
                shape_str(self),
                shape_str(other)
            )));
        }
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let out = matmul_raw(&a, &b, n, k, m);
        drop(a);
        drop(b);
        Ok(Tensor::from_op(n, m, out, vec![self.clone(), other.clone()], Op::Matmul))
    }

    /// Add a `[1 x m]` bias row to every row of a `[n x m]` matrix.
    pub fn bias_add(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows() != 1 || bias.cols() != self.cols() {
            return Err(Error::Shape(format!(
                "bias_add on shapes {} vs {}",
                shape_str(self),
                shape_str(bias)
            )));
        }
        let (n, m) = self.shape();
        let x = self.inner.data.borrow();
        let b = bias.inner.data.borrow();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for c in 0..m {
                out.push(x[r * m + c] + b[c]);
            }
        }
        drop(x);
        drop(b);
        Ok(Tensor::from_op(n, m, out, vec![self.clone(), bias.clone()], Op::BiasAdd))
    }

    // ----- row-wise primitives ----------------------------------------------------

    /// Softmax along each row.
    pub fn softmax_rows(&self) -> Tensor {
        let (n, m) = self.shape();
        let x = self.inner.data.borrow();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &x[r * m..(r + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..m {
                let e = (row[c] - mx).exp();
                out[r * m + c] = e;
                sum += e;
            }
            for c in 0..m {
                out[r * m + c] /= sum;
            }
        }
        drop(x);
        Tensor::from_op(n, m, out, vec![self.clone()], Op::SoftmaxRows)
    }

    /// Inclusive cumulative sum along each row.
    pub fn cumsum_rows(&self) -> Tensor {
        let (n, m) = self.shape();
        let x = self.inner.data.borrow();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..m {
                acc += x[r * m + c];
                out[r * m + c] = acc;
            }
        }
        drop(x);
        Tensor::from_op(n, m, out, vec![self.clone()], Op::CumsumRows)
    }

    /// Sum along each row: `[n x m] -> [n x 1]`.
    pub fn row_sum(&self) -> Tensor {
        let (n, m) = self.shape();
        let x = self.inner.data.borrow();
        let out: Vec<f64> = (0..n).map(|r| x[r * m..(r + 1) * m].iter().sum()).collect();
        drop(x);
        Tensor::from_op(n, 1, out, vec![self.clone()], Op::RowSum)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.inner.data.borrow().iter().sum();
        Tensor::from_op(1, 1, vec![total], vec![self.clone()], Op::Sum)
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let total: f64 = self.inner.data.borrow().iter().sum();
        Tensor::from_op(1, 1, vec![total / n], vec![self.clone()], Op::Mean)
    }

    // ----- layout primitives ------------------------------------------------------

    /// Contiguous column slice `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of {} columns",
                start + len,
                self.cols()
            )));
        }
        let (n, m) = self.shape();
        let x = self.inner.data.borrow();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&x[r * m + start..r * m + start + len]);
        }
        drop(x);
        Ok(Tensor::from_op(n, len, out, vec![self.clone()], Op::SliceCols { start, len }))
    }

    /// Concatenate along columns; all parts must share a row count.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let n = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of zero tensors".into()))?
            .rows();
        if parts.iter().any(|p| p.rows() != n) {
            return Err(Error::Shape("concat_cols with differing row counts".into()));
        }
        let m: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(n * m);
        let borrows: Vec<_> = parts.iter().map(|p| p.inner.data.borrow()).collect();
        for r in 0..n {
            for (p, d) in parts.iter().zip(&borrows) {
                let pc = p.cols();
                out.extend_from_slice(&d[r * pc..(r + 1) * pc]);
            }
        }
        drop(borrows);
        Ok(Tensor::from_op(n, m, out, parts.to_vec(), Op::ConcatCols))
    }

    /// Gather one element per row: `out[r] = self[r, indices[r]]`.
    pub fn select_per_row(&self, indices: &[usize]) -> Result<Tensor> {
        let (n, m) = self.shape();
        if indices.len() != n {
            return Err(Error::Shape(format!(
                "select_per_row needs {n} indices, got {}",
                indices.len()
            )));
        }
        if indices.iter().any(|&j| j >= m) {
            return Err(Error::Shape(format!("select_per_row index out of {m} columns")));
        }
        let x = self.inner.data.borrow();
        let out: Vec<f64> = indices.iter().enumerate().map(|(r, &j)| x[r * m + j]).collect();
        drop(x);
        Ok(Tensor::from_op(
            n,
            1,
            out,
            vec![self.clone()],
            Op::SelectPerRow { indices: indices.to_vec() },
        ))
    }

    /// Column permutation: `out[:, j] = self[:, perm[j]]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Result<Tensor> {
        let (n, m) = self.shape();
        if perm.len() != m {
            return Err(Error::Shape(format!(
                "permute_cols of length {} on {m} columns",
                perm.len()
            )));
        }
        let x = self.inner.data.borrow();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for &src in perm {
                out.push(x[r * m + src]);
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            n,
            m,
            out,
            vec![self.clone()],
            Op::PermuteCols { perm: perm.to_vec() },
        ))
    }

    /// Elementwise select: `out[i] = mask[i] ? self[i] : other[i]`.
    ///
    /// Gradients route only into the selected branch, so the discarded branch
    /// may hold values that would be invalid to differentiate through.
    pub fn where_mask(&self, mask: &[bool], other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "where_mask on shapes {} vs {}",
                shape_str(self),
                shape_str(other)
            )));
        }
        if mask.len() != self.numel() {
            return Err(Error::Shape(format!(
                "where_mask needs {} mask entries, got {}",
                self.numel(),
                mask.len()
            )));
        }
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let out: Vec<f64> = mask
            .iter()
            .enumerate()
            .map(|(i, &keep)| if keep { a[i] } else { b[i] })
            .collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            vec![self.clone(), other.clone()],
            Op::WhereMask { mask: mask.to_vec() },
        ))
    }

    // ----- backward ---------------------------------------------------------------

    /// Fill gradients of every ancestor with `d(self)/d(ancestor)`.
    ///
    /// `self` must be scalar. Gradients accumulate: calling backward twice
    /// without `zero_grad` doubles them.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got {}",
                shape_str(self)
            )));
        }
        if !self.inner.requires_grad {
            return Ok(());
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(op) = node.inner.op.as_ref() else { continue };
            let grad = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue, // not on any path to the loss
            };
            apply_vjp(node, op, &grad);
        }
        Ok(())
    }
}

/// Post-order (parents before children) over the subgraph that requires
/// gradients, each node exactly once. Iterative to keep deep graphs off the
/// call stack.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.inner.id);
    while let Some((node, child)) = stack.pop() {
        if child < node.inner.parents.len() {
            stack.push((node.clone(), child + 1));
            let parent = node.inner.parents[child].clone();
            if parent.inner.requires_grad && visited.insert(parent.inner.id) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Accumulate one node's vector-Jacobian product into its parents.
fn apply_vjp(node: &Tensor, op: &Op, g: &[f64]) {
    let parents = &node.inner.parents;
    let out = node.inner.data.borrow();

    // Elementwise binary ops share the scalar-broadcast reduction logic.
    let push = |parent: &Tensor, full: Vec<f64>| {
        if !parent.inner.requires_grad {
            return;
        }
        if parent.numel() == 1 && full.len() > 1 {
            parent.accumulate_grad(&[full.iter().sum()]);
        } else {
            parent.accumulate_grad(&full);
        }
    };

    match op {
        Op::Add => {
            push(&parents[0], g.to_vec());
            push(&parents[1], g.to_vec());
        }
        Op::Sub => {
            push(&parents[0], g.to_vec());
            push(&parents[1], g.iter().map(|v| -v).collect());
        }
        Op::Mul => {
            let a = parents[0].inner.data.borrow();
            let b = parents[1].inner.data.borrow();
            let fetch = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
            let da: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * fetch(&b, i)).collect();
            let db: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * fetch(&a, i)).collect();
            drop(a);
            drop(b);
            push(&parents[0], da);
            push(&parents[1], db);
        }
        Op::Div => {
            let a = parents[0].inner.data.borrow();
            let b = parents[1].inner.data.borrow();
            let fetch = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
            let da: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi / fetch(&b, i)).collect();
            let db: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, gi)| {
                    let bi = fetch(&b, i);
                    -gi * fetch(&a, i) / (bi * bi)
                })
                .collect();
            drop(a);
            drop(b);
            push(&parents[0], da);
            push(&parents[1], db);
        }
        Op::Neg => push(&parents[0], g.iter().map(|v| -v).collect()),
        Op::Scale(c) => push(&parents[0], g.iter().map(|v| c * v).collect()),
        Op::AddScalar => push(&parents[0], g.to_vec()),
        Op::Relu => {
            let x = parents[0].inner.data.borrow();
            let dx = g
                .iter()
                .zip(x.iter())
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect();
            drop(x);
            push(&parents[0], dx);
        }
        Op::Exp => push(&parents[0], g.iter().zip(out.iter()).map(|(gi, yi)| gi * yi).collect()),
        Op::Log => {
            let x = parents[0].inner.data.borrow();
            let dx = g.iter().zip(x.iter()).map(|(gi, xi)| gi / xi).collect();
            drop(x);
            push(&parents[0], dx);
        }
        Op::Tanh => push(
            &parents[0],
            g.iter().zip(out.iter()).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect(),
        ),
        Op::Sigmoid => push(
            &parents[0],
            g.iter().zip(out.iter()).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect(),
        ),
        Op::Softplus => {
            let x = parents[0].inner.data.borrow();
            let dx = g.iter().zip(x.iter()).map(|(gi, &xi)| gi * sigmoid(xi)).collect();
            drop(x);
            push(&parents[0], dx);
        }
        Op::Sqrt => push(
            &parents[0],
            g.iter().zip(out.iter()).map(|(gi, yi)| gi / (2.0 * yi)).collect(),
        ),
        Op::Matmul => {
            // out = A.B : dA = g.B^T, dB = A^T.g
            let (n, m) = (node.rows(), node.cols());
            let k = parents[0].cols();
            if parents[0].inner.requires_grad {
                let b = parents[1].inner.data.borrow();
                let bt = transpose_raw(&b, k, m);
                let da = matmul_raw(g, &bt, n, m, k);
                drop(b);
                parents[0].accumulate_grad(&da);
            }
            if parents[1].inner.requires_grad {
                let a = parents[0].inner.data.borrow();
                let at = transpose_raw(&a, n, k);
                let db = matmul_raw(&at, g, k, n, m);
                drop(a);
                parents[1].accumulate_grad(&db);
            }
        }
        Op::BiasAdd => {
            let (n, m) = (node.rows(), node.cols());
            if parents[0].inner.requires_grad {
                parents[0].accumulate_grad(g);
            }
            if parents[1].inner.requires_grad {
                let mut db = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        db[c] += g[r * m + c];
                    }
                }
                parents[1].accumulate_grad(&db);
            }
        }
        Op::SoftmaxRows => {
            let (n, m) = (node.rows(), node.cols());
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                let y = &out[r * m..(r + 1) * m];
                let gr = &g[r * m..(r + 1) * m];
                let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                for c in 0..m {
                    dx[r * m + c] = y[c] * (gr[c] - dot);
                }
            }
            push(&parents[0], dx);
        }
        Op::CumsumRows => {
            let (n, m) = (node.rows(), node.cols());
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                let mut acc = 0.0;
                for c in (0..m).rev() {
                    acc += g[r * m + c];
                    dx[r * m + c] = acc;
                }
            }
            push(&parents[0], dx);
        }
        Op::RowSum => {
            let (n, m) = parents[0].shape();
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                for c in 0..m {
                    dx[r * m + c] = g[r];
                }
            }
            push(&parents[0], dx);
        }
        Op::Sum => push(&parents[0], vec![g[0]; parents[0].numel()]),
        Op::Mean => {
            let n = parents[0].numel();
            push(&parents[0], vec![g[0] / n as f64; n]);
        }
        Op::SliceCols { start, len } => {
            let (n, m) = parents[0].shape();
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                for c in 0..*len {
                    dx[r * m + start + c] = g[r * len + c];
                }
            }
            push(&parents[0], dx);
        }
        Op::ConcatCols => {
            let n = node.rows();
            let m = node.cols();
            let mut offset = 0;
            for p in parents {
                let pc = p.cols();
                if p.inner.requires_grad {
                    let mut dp = vec![0.0; n * pc];
                    for r in 0..n {
                        dp[r * pc..(r + 1) * pc]
                            .copy_from_slice(&g[r * m + offset..r * m + offset + pc]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += pc;
            }
        }
        Op::SelectPerRow { indices } => {
            let (n, m) = parents[0].shape();
            let mut dx = vec![0.0; n * m];
            for (r, &j) in indices.iter().enumerate() {
                dx[r * m + j] += g[r];
            }
            push(&parents[0], dx);
        }
        Op::PermuteCols { perm } => {
            let (n, m) = parents[0].shape();
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                for (j, &src) in perm.iter().enumerate() {
                    dx[r * m + src] += g[r * m + j];
                }
            }
            push(&parents[0], dx);
        }
        Op::WhereMask { mask } => {
            let da: Vec<f64> = g
                .iter()
                .zip(mask.iter())
                .map(|(gi, &keep)| if keep { *gi } else { 0.0 })
                .collect();
            let db: Vec<f64> = g
                .iter()
                .zip(mask.iter())
                .map(|(gi, &keep)| if keep { 0.0 } else { *gi })
                .collect();
            push(&parents[0], da);
            push(&parents[1], db);
        }
    }
}

// ----- raw kernels and stable scalar maps ------------------------------------------

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for c in 0..m {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe softplus: `log1p(exp(-|x|)) + max(x, 0)`.
pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

/// Inverse of [`softplus`] on positive inputs.
pub fn softplus_inv(y: f64) -> f64 {
    // softplus(x) = y  =>  x = y + log(1 - exp(-y)), stable for y > 0
    y + (-(-y).exp()).ln_1p()
}
