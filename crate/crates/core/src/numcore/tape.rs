//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive pushes one node holding its output value and whatever it
//! needs for the backward pass. Node ids are assigned in execution order, so a
//! single descending sweep over the tape is a valid reverse topological order.

use std::cell::{Ref, RefCell};
use std::fmt;

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{bail, Error, Result};

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Transpose(usize),
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceRows { src: usize, start: usize },
    ConcatRows(Vec<usize>),
    Gelu(usize),
    Abs(usize),
    Square(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout { src: usize, mask: Vec<T> },
    RankWeightedCols {
        src: usize,
        weights: Vec<T>,
        order: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Dropout { .. } => "dropout",
            Op::RankWeightedCols { .. } => "rank_weighted_cols",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed primitives for one computation graph.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Accumulated gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Number of recorded ops whose backward rule ran.
    pub fn ops_visited(&self) -> usize {
        self.visited
    }
}

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>, var: Var<'_, T>) {
        if let Some(g) = grads.get(var) {
            self.grad.add_assign(g);
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that does not receive a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    /// Records a value that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        self.push_leaf(p.value.clone(), true)
    }

    fn push_leaf(&self, value: Tensor<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Runs the reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            bail!(Contract, "loss was not recorded on this tape");
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id];
        if !out.value.is_scalar() {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                out.value.shape()
            );
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(out.value.shape()));
        let mut visited = 0;
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            visited += 1;
            backprop(&nodes, id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads, visited })
    }
}

fn grad_slot<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Tensor<T>>],
    id: usize,
) -> Option<&'g mut Tensor<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let shape = nodes[id].value.shape();
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(shape)))
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if let Some(g) = grad_slot(nodes, grads, id) {
        f(g.data_mut());
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    dy: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let out = &nodes[id].value;
    let dyd = dy.data();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            let bd = bv.data();
            let ad = av.data();
            // dA = dY · Bᵀ
            accumulate(nodes, grads, a, |ga| {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    dyd,
                    (n as isize, 1),
                    bd,
                    (1, n as isize),
                    T::one(),
                    ga,
                    (k as isize, 1),
                )
            });
            // dB = Aᵀ · dY
            accumulate(nodes, grads, b, |gb| {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    ad,
                    (1, k as isize),
                    dyd,
                    (n as isize, 1),
                    T::one(),
                    gb,
                    (n as isize, 1),
                )
            });
        }
        &Op::Add(a, b) => {
            for src in [a, b] {
                accumulate(nodes, grads, src, |g| add_into(g, dyd));
            }
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, |g| add_into(g, dyd));
            accumulate(nodes, grads, b, |g| {
                g.iter_mut().zip(dyd).for_each(|(g, &d)| *g -= d)
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            accumulate(nodes, grads, a, |g| {
                for ((g, &d), &o) in g.iter_mut().zip(dyd).zip(bv) {
                    *g += d * o;
                }
            });
            accumulate(nodes, grads, b, |g| {
                for ((g, &d), &o) in g.iter_mut().zip(dyd).zip(av) {
                    *g += d * o;
                }
            });
        }
        &Op::AddRow(a, r) => {
            accumulate(nodes, grads, a, |g| add_into(g, dyd));
            let cols = out.cols();
            accumulate(nodes, grads, r, |g| {
                for row in dyd.chunks_exact(cols) {
                    add_into(g, row);
                }
            });
        }
        &Op::Scale(a, s) => {
            accumulate(nodes, grads, a, |g| {
                g.iter_mut().zip(dyd).for_each(|(g, &d)| *g += s * d)
            });
        }
        &Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            accumulate(nodes, grads, a, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] += dyd[i * c + j];
                    }
                }
            });
        }
        &Op::SliceCols { src, start } => {
            let w = out.cols();
            let full = nodes[src].value.cols();
            accumulate(nodes, grads, src, |g| {
                for (grow, drow) in g.chunks_exact_mut(full).zip(dyd.chunks_exact(w)) {
                    add_into(&mut grow[start..start + w], drow);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                accumulate(nodes, grads, p, |g| {
                    for (grow, drow) in g.chunks_exact_mut(w).zip(dyd.chunks_exact(total)) {
                        add_into(grow, &drow[offset..offset + w]);
                    }
                });
                offset += w;
            }
        }
        &Op::SliceRows { src, start } => {
            let c = out.cols();
            accumulate(nodes, grads, src, |g| {
                add_into(&mut g[start * c..start * c + dyd.len()], dyd)
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                accumulate(nodes, grads, p, |g| add_into(g, &dyd[offset..offset + len]));
                offset += len;
            }
        }
        &Op::Gelu(a) => {
            let x = nodes[a].value.data();
            accumulate(nodes, grads, a, |g| {
                for ((g, &d), &x) in g.iter_mut().zip(dyd).zip(x) {
                    *g += d * gelu_grad(x);
                }
            });
        }
        &Op::Abs(a) => {
            let x = nodes[a].value.data();
            accumulate(nodes, grads, a, |g| {
                for ((g, &d), &x) in g.iter_mut().zip(dyd).zip(x) {
                    if x > T::zero() {
                        *g += d;
                    } else if x < T::zero() {
                        *g -= d;
                    }
                }
            });
        }
        &Op::Square(a) => {
            let x = nodes[a].value.data();
            let two = T::c(2.0);
            accumulate(nodes, grads, a, |g| {
                for ((g, &d), &x) in g.iter_mut().zip(dyd).zip(x) {
                    *g += two * x * d;
                }
            });
        }
        &Op::SoftmaxRows(a) => {
            let c = out.cols();
            let y = out.data();
            accumulate(nodes, grads, a, |g| {
                for ((grow, drow), yrow) in g
                    .chunks_exact_mut(c)
                    .zip(dyd.chunks_exact(c))
                    .zip(y.chunks_exact(c))
                {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                    for ((g, &d), &y) in grow.iter_mut().zip(drow).zip(yrow) {
                        *g += y * (d - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = out.cols();
            let gv = nodes[*gain].value.data();
            accumulate(nodes, grads, *gain, |g| {
                for (drow, hrow) in dyd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ((g, &d), &h) in g.iter_mut().zip(drow).zip(hrow) {
                        *g += d * h;
                    }
                }
            });
            accumulate(nodes, grads, *bias, |g| {
                for drow in dyd.chunks_exact(c) {
                    add_into(g, drow);
                }
            });
            let n = T::from_usize(c).unwrap();
            accumulate(nodes, grads, *x, |g| {
                let mut dxhat = vec![T::zero(); c];
                for (r, grow) in g.chunks_exact_mut(c).enumerate() {
                    let drow = &dyd[r * c..(r + 1) * c];
                    let hrow = &xhat[r * c..(r + 1) * c];
                    let mut sum = T::zero();
                    let mut sum_h = T::zero();
                    for j in 0..c {
                        dxhat[j] = drow[j] * gv[j];
                        sum += dxhat[j];
                        sum_h += dxhat[j] * hrow[j];
                    }
                    let scale = inv_std[r] / n;
                    for j in 0..c {
                        grow[j] += scale * (n * dxhat[j] - sum - hrow[j] * sum_h);
                    }
                }
            });
        }
        Op::Dropout { src, mask } => {
            accumulate(nodes, grads, *src, |g| {
                for ((g, &d), &m) in g.iter_mut().zip(dyd).zip(mask) {
                    *g += d * m;
                }
            });
        }
        Op::RankWeightedCols {
            src,
            weights,
            order,
        } => {
            let rows = nodes[*src].value.rows();
            let cols = out.cols();
            accumulate(nodes, grads, *src, |g| {
                for j in 0..cols {
                    let ord = &order[j * rows..(j + 1) * rows];
                    for (rank, &w) in weights.iter().enumerate() {
                        if w != T::zero() {
                            g[ord[rank] * cols + j] += w * dyd[j];
                        }
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            label,
            probs,
        } => {
            let d = dyd[0];
            accumulate(nodes, grads, *logits, |g| {
                for (c, (g, &p)) in g.iter_mut().zip(probs).enumerate() {
                    let target = if c == *label { T::one() } else { T::zero() };
                    *g += d * (p - target);
                }
            });
        }
        &Op::Sum(a) => {
            let d = dyd[0];
            accumulate(nodes, grads, a, |g| g.iter_mut().for_each(|g| *g += d));
        }
        &Op::Mean(a) => {
            let d = dyd[0] / T::from_usize(nodes[a].value.numel()).unwrap();
            accumulate(nodes, grads, a, |g| g.iter_mut().for_each(|g| *g += d));
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_value<T: Scalar>(x: T) -> T {
    T::c(0.5) * x * (T::one() + (x * T::c(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(0.5 * std::f64::consts::FRAC_2_SQRT_PI * FRAC_1_SQRT_2);
    cdf + x * pdf
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(
            Dimension,
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        );
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn check_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            bail!(Contract, "operands recorded on different tapes");
        }
        Ok(())
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&rhs)?;
        let v = self.value().matmul(&rhs.value())?;
        self.tape.push(v, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    fn zip_with(
        self,
        rhs: Var<'t, T>,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.check_tape(&rhs)?;
        let v = {
            let (a, b) = (self.value(), rhs.value());
            same_shape(name, &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(v, op, &[self.id, rhs.id])
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&row)?;
        let v = {
            let (a, r) = (self.value(), row.value());
            let (_, cols) = a.dims2()?;
            if r.numel() != cols {
                bail!(
                    Dimension,
                    "add_row: row of {} elements for matrix {:?}",
                    r.numel(),
                    a.shape()
                );
            }
            let mut out = a.clone();
            for chunk in out.data_mut().chunks_exact_mut(cols) {
                add_into(chunk, r.data());
            }
            out
        };
        self.tape.push(v, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        let v = self.value().map(|x| x * s);
        self.tape.push(v, Op::Scale(self.id, s), &[self.id])
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let v = self.value().transpose()?;
        self.tape.push(v, Op::Transpose(self.id), &[self.id])
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let v = {
            let a = self.value();
            let (rows, cols) = a.dims2()?;
            if start > end || end > cols {
                bail!(Dimension, "slice_cols {start}..{end} out of {cols} columns");
            }
            let data = a
                .data()
                .chunks_exact(cols)
                .flat_map(|r| r[start..end].iter().copied())
                .collect();
            Tensor::matrix(rows, end - start, data)?
        };
        self.tape
            .push(v, Op::SliceCols { src: self.id, start }, &[self.id])
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let v = {
            let a = self.value();
            let (rows, cols) = a.dims2()?;
            if start > end || end > rows {
                bail!(Dimension, "slice_rows {start}..{end} out of {rows} rows");
            }
            Tensor::matrix(end - start, cols, a.data()[start * cols..end * cols].to_vec())?
        };
        self.tape
            .push(v, Op::SliceRows { src: self.id, start }, &[self.id])
    }

    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            bail!(Dimension, "concat_cols of nothing");
        };
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let rows = vals[0].dims2()?.0;
            let mut total = 0;
            for v in &vals {
                let (r, c) = v.dims2()?;
                if r != rows {
                    bail!(Dimension, "concat_cols: row counts {r} and {rows} differ");
                }
                total += c;
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        for p in parts {
            first.check_tape(p)?;
        }
        first.tape.push(v, Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            bail!(Dimension, "concat_rows of nothing");
        };
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let cols = vals[0].dims2()?.1;
            let mut rows = 0;
            let mut data = Vec::new();
            for v in &vals {
                let (r, c) = v.dims2()?;
                if c != cols {
                    bail!(Dimension, "concat_rows: column counts {c} and {cols} differ");
                }
                rows += r;
                data.extend_from_slice(v.data());
            }
            Tensor::matrix(rows, cols, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        for p in parts {
            first.check_tape(p)?;
        }
        first.tape.push(v, Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        let v = self.value().map(gelu_value);
        self.tape.push(v, Op::Gelu(self.id), &[self.id])
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        let v = self.value().map(T::abs);
        self.tape.push(v, Op::Abs(self.id), &[self.id])
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        let v = self.value().map(|x| x * x);
        self.tape.push(v, Op::Square(self.id), &[self.id])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let v = {
            let mut a = self.value().clone();
            let (_, cols) = a.dims2()?;
            if cols == 0 {
                bail!(Dimension, "softmax over an empty row");
            }
            for row in a.data_mut().chunks_exact_mut(cols) {
                softmax_in_place(row);
            }
            a
        };
        self.tape.push(v, Op::SoftmaxRows(self.id), &[self.id])
    }

    /// Per-row normalization over the feature (column) dimension followed by
    /// an affine map with `1×cols` gain and bias.
    pub fn layernorm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.check_tape(&gain)?;
        self.check_tape(&bias)?;
        if eps < T::zero() {
            bail!(Config, "layernorm eps must be non-negative");
        }
        let (v, xhat, inv_std) = {
            let x = self.value();
            let (rows, cols) = x.dims2()?;
            if cols == 0 {
                bail!(Dimension, "layernorm over a zero-length feature dimension");
            }
            let (g, b) = (gain.value(), bias.value());
            if g.numel() != cols || b.numel() != cols {
                bail!(
                    Dimension,
                    "layernorm affine params of {} / {} elements for {cols} features",
                    g.numel(),
                    b.numel()
                );
            }
            let n = T::from_usize(cols).unwrap();
            let mut xhat = Vec::with_capacity(rows * cols);
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(rows * cols);
            for row in x.data().chunks_exact(cols) {
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let denom = (var + eps).sqrt();
                let inv = if denom > T::zero() { denom.recip() } else { T::zero() };
                inv_std.push(inv);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(h * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::matrix(rows, cols, out)?, xhat, inv_std)
        };
        self.tape.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        )
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout(self, p: f64, rng: &mut impl Rng) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            bail!(Config, "dropout probability {p} outside [0, 1)");
        }
        if p == 0.0 {
            return Ok(self);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let (v, mask) = {
            let a = self.value();
            let mask: Vec<T> = (0..a.numel())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect();
            let data = a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (Tensor::new(a.shape().to_vec(), data)?, mask)
        };
        self.tape
            .push(v, Op::Dropout { src: self.id, mask }, &[self.id])
    }

    /// For each column, sorts entries in descending order and returns the
    /// `weights`-weighted sum over ranks as a `1×cols` row. Rank `r` gets
    /// `weights[r]`; missing trailing weights count as zero.
    pub fn rank_weighted_cols(self, weights: &[T]) -> Result<Var<'t, T>> {
        let (v, order) = {
            let a = self.value();
            let (rows, cols) = a.dims2()?;
            if weights.len() > rows {
                bail!(
                    Dimension,
                    "{} rank weights for a column of {rows} entries",
                    weights.len()
                );
            }
            let mut order = Vec::with_capacity(rows * cols);
            let mut out = Vec::with_capacity(cols);
            let mut idx: Vec<usize> = Vec::with_capacity(rows);
            for j in 0..cols {
                idx.clear();
                idx.extend(0..rows);
                idx.sort_by(|&p, &q| {
                    a.at(q, j)
                        .partial_cmp(&a.at(p, j))
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                let s = weights
                    .iter()
                    .zip(&idx)
                    .map(|(&w, &i)| w * a.at(i, j))
                    .sum::<T>();
                out.push(s);
                order.extend_from_slice(&idx);
            }
            (Tensor::matrix(1, cols, out)?, order)
        };
        self.tape.push(
            v,
            Op::RankWeightedCols {
                src: self.id,
                weights: weights.to_vec(),
                order,
            },
            &[self.id],
        )
    }

    /// `-log softmax(logits)[label]` for a single `1×C` row of logits.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t, T>> {
        let (v, probs) = {
            let a = self.value();
            let c = a.numel();
            if label >= c {
                bail!(Contract, "label {label} out of range for {c} classes");
            }
            let mut probs = a.data().to_vec();
            let max = probs.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = probs.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            probs.iter_mut().for_each(|z| *z = (*z - lse).exp());
            (Tensor::scalar(lse - a.data()[label]), probs)
        };
        self.tape.push(
            v,
            Op::CrossEntropy {
                logits: self.id,
                label,
                probs,
            },
            &[self.id],
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let v = Tensor::scalar(self.value().data().iter().copied().sum());
        self.tape.push(v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let v = {
            let a = self.value();
            if a.numel() == 0 {
                bail!(Dimension, "mean of an empty tensor");
            }
            Tensor::scalar(a.data().iter().copied().sum::<T>() / T::from_usize(a.numel()).unwrap())
        };
        self.tape.push(v, Op::Mean(self.id), &[self.id])
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_rows(&[&[1.0, -2.0, 3.0]]));
        let loss = p.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0]]));
        let loss = p.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_param_keeps_zero_grad() {
        let tape = Tape::<f64>::new();
        let mut used = Param::new(Tensor::ones(&[1, 3]));
        let mut unused = Param::new(Tensor::ones(&[1, 3]));
        let u = tape.param(&used);
        let n = tape.param(&unused);
        let _ = n.scale(3.0).unwrap();
        let loss = u.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        used.accumulate(&g, u);
        unused.accumulate(&g, n);
        assert_eq!(used.grad.data(), &[1.0; 3]);
        assert_eq!(unused.grad.data(), &[0.0; 3]);
        used.zero_grad();
        assert!(used.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn each_op_visited_once() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(random(&[3, 4], 1));
        let b = tape.leaf(random(&[4, 2], 2));
        let c = a.matmul(b).unwrap();
        let d = c.gelu().unwrap();
        let e = d.add(c).unwrap();
        let loss = e.mean().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.ops_visited(), 4);
    }

    #[test]
    fn matmul_grad_is_b_transpose() {
        let a0 = random(&[3, 4], 3);
        let b0 = random(&[4, 5], 4);
        let tape = Tape::<f64>::new();
        let a = tape.leaf(a0.clone());
        let b = tape.constant(b0.clone());
        let loss = a.matmul(b).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        let ga = g.get(a).unwrap();
        for i in 0..3 {
            for l in 0..4 {
                let expected: f64 = (0..5).map(|j| b0.at(l, j)).sum();
                assert!((ga.at(i, l) - expected).abs() < 1e-12);
            }
        }
        assert!(g.get(b).is_none());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_value(0.0f64), 0.0);
        let g1 = gelu_value(1.0f64);
        assert!((g1 - 0.841_344_746_068_542_9).abs() < 1e-12, "{g1:.17}");
        assert!((gelu_value(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu_value(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn layernorm_hand_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]]));
        let g = tape.constant(Tensor::ones(&[1, 3]));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        let y = x.layernorm(g, b, 0.0).unwrap();
        let v = y.value();
        let s = 1.5f64.sqrt();
        for (got, want) in v.row(0).iter().zip([-s, 0.0, s]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);
        drop(v);
        let y = x.layernorm(g, b, 1e-5).unwrap();
        assert_eq!(y.value().row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layernorm_empty_features() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 0]));
        let g = tape.constant(Tensor::zeros(&[1, 0]));
        assert!(matches!(
            x.layernorm(g, g, 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(random(&[5, 7], 9).map(|v| v * 50.0));
        let y = x.softmax_rows().unwrap();
        for r in 0..5 {
            let s: f64 = y.value().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 3]));
        let ce = l.cross_entropy(1).unwrap();
        assert!((ce.value().item() - 3f64.ln()).abs() < 1e-12);
        assert!(l.cross_entropy(3).is_err());
    }

    #[test]
    fn rank_weighted_top_n() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::from_rows(&[&[0.2], &[0.9], &[0.5]]));
        let top2 = s.rank_weighted_cols(&[0.5, 0.5]).unwrap();
        assert!((top2.value().item() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn nan_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2], f64::MAX));
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let inputs = vec![random(&[3, 4], 11), random(&[3, 4], 12), random(&[1, 4], 13)];
        let worst = check_gradients(&inputs, 1e-5, |_, v| {
            let [a, b, r] = [v[0], v[1], v[2]];
            let x = a.mul(b)?.sub(b.scale(0.3)?)?.add_row(r)?;
            let y = x.gelu()?.add(x.abs()?)?;
            let z = y.transpose()?.softmax_rows()?.square()?;
            z.mean()
        })
        .unwrap();
        assert!(worst < 1e-6, "max rel err {worst}");
    }

    #[test]
    fn structural_grads_match_finite_differences() {
        let inputs = vec![random(&[4, 6], 21), random(&[6, 3], 22), random(&[1, 3], 23), random(&[1, 3], 24)];
        let worst = check_gradients(&inputs, 1e-5, |_, v| {
            let h = v[0].matmul(v[1])?;
            let h = h.layernorm(v[2], v[3], 1e-5)?;
            let left = h.slice_cols(0, 2)?;
            let right = h.slice_cols(2, 3)?;
            let joined = Var::concat_cols(&[right, left])?;
            let top = joined.slice_rows(0, 1)?;
            let rest = joined.slice_rows(1, 4)?;
            let stacked = Var::concat_rows(&[rest, top])?;
            let pooled = stacked.rank_weighted_cols(&[0.5, 0.3, 0.2])?;
            let ce = pooled.cross_entropy(1)?;
            ce.add(stacked.square()?.mean()?)
        })
        .unwrap();
        assert!(worst < 1e-6, "max rel err {worst}");
    }
}
