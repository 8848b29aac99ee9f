//! Reverse-mode automatic differentiation over [`Arr`].
//!
//! A [`Tape`] is an append-only list of nodes. Recording an operation runs
//! its forward computation immediately and stores the inputs' node ids plus
//! the forward value, which together are enough to replay the chain rule
//! backwards. Tapes are cheap and are rebuilt from scratch every training
//! step; parameters enter as leaves via [`Tape::input`].
//!
//! [`Value::backward`] walks the nodes in reverse append order and
//! accumulates gradients with `+=`, which makes the result deterministic:
//! the same graph always produces bitwise-identical gradients.

use std::cell::RefCell;
use std::fmt;

use crate::arr::{Arr, Shape};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: expected {expected}, got {got:?}")]
    Rank { op: &'static str, expected: &'static str, got: Shape },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got {got:?}")]
    NonScalarRoot { got: Shape },
}

type Result<T> = std::result::Result<T, TapeError>;

// ─── Nodes ───────────────────────────────────────────────────────────────

enum Op {
    /// Input with no parents: parameter leaf or constant.
    Leaf,
    /// Forward identity; propagates no gradient to its parent.
    StopGradient,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    RowMean(usize),
    Square(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Silu(usize),
    /// Column-wise concatenation of matrices with equal row counts.
    ConcatCols(Vec<usize>),
    /// Column range `[start, end)` of a matrix.
    SliceCols(usize, usize, usize),
    /// Vector of length `c` repeated as each of `rows` rows.
    BroadcastRows(usize, usize),
    /// Row `i` of the matrix scaled by element `i` of the vector.
    RowScale(usize, usize),
    /// Rows of a table selected by index, duplicates allowed.
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Arr,
    op: Op,
}

// ─── Tape and values ─────────────────────────────────────────────────────

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`]. Copyable; all arithmetic goes through
/// methods that record new nodes.
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf holding `data`. Used both for trainable parameters and
    /// for constants; the distinction only matters to the caller, which
    /// queries gradients for the leaves it cares about.
    pub fn input(&self, data: Arr) -> Value<'_> {
        self.push(data, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Value<'_> {
        self.input(Arr::scalar(v))
    }

    /// Column-wise concatenation. All parts must be matrices with the same
    /// number of rows.
    pub fn concat_cols<'t>(&'t self, parts: &[Value<'t>]) -> Result<Value<'t>> {
        if parts.is_empty() {
            return Err(TapeError::Invalid { op: "concat_cols", detail: "no inputs".into() });
        }
        let mut rows = 0;
        let mut cols = 0;
        for (i, p) in parts.iter().enumerate() {
            debug_assert!(std::ptr::eq(p.tape, self), "value from a different tape");
            match p.shape() {
                Shape::Matrix(r, c) => {
                    if i == 0 {
                        rows = r;
                    } else if r != rows {
                        return Err(TapeError::Shape {
                            op: "concat_cols",
                            lhs: Shape::Matrix(rows, cols),
                            rhs: Shape::Matrix(r, c),
                        });
                    }
                    cols += c;
                }
                other => {
                    return Err(TapeError::Rank {
                        op: "concat_cols",
                        expected: "matrix",
                        got: other,
                    })
                }
            }
        }
        let nodes = self.nodes.borrow();
        let mut data = vec![0.0; rows * cols];
        let mut at = 0;
        for p in parts {
            let part = &nodes[p.id].value;
            let (_, c) = part.dims();
            for i in 0..rows {
                data[i * cols + at..i * cols + at + c].copy_from_slice(part.row(i));
            }
            at += c;
        }
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Arr::matrix(rows, cols, data), Op::ConcatCols(ids)))
    }

    fn push(&self, value: Arr, op: Op) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Value { tape: self, id: nodes.len() - 1 }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }
}

impl fmt::Debug for Value<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Value(id={}, shape={:?})", self.id, self.shape())
    }
}

impl<'t> Value<'t> {
    pub fn shape(&self) -> Shape {
        self.tape.with_value(self.id, |v| v.shape().clone())
    }

    /// Clone of the forward value.
    pub fn data(&self) -> Arr {
        self.tape.with_value(self.id, |v| v.clone())
    }

    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |v| v.item())
    }

    fn binary(
        self,
        other: Value<'t>,
        op_name: &'static str,
        make: impl FnOnce(usize, usize) -> Op,
        f: impl FnOnce(&Arr, &Arr) -> Arr,
    ) -> Result<Value<'t>> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "values from different tapes");
        let (a, b) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape() != b.shape() {
                return Err(TapeError::Shape {
                    op: op_name,
                    lhs: a.shape().clone(),
                    rhs: b.shape().clone(),
                });
            }
            (a.clone(), b.clone())
        };
        Ok(self.tape.push(f(&a, &b), make(self.id, other.id)))
    }

    pub fn add(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "add", Op::Add, |a, b| {
            let mut out = a.clone();
            out.axpy(1.0, b);
            out
        })
    }

    pub fn sub(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| {
            let mut out = a.clone();
            out.axpy(-1.0, b);
            out
        })
    }

    pub fn mul(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| {
            let mut out = a.clone();
            for (x, &y) in out.data_mut().iter_mut().zip(b.data()) {
                *x *= y;
            }
            out
        })
    }

    pub fn matmul(self, other: Value<'t>) -> Result<Value<'t>> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "values from different tapes");
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        match (a.shape(), b.shape()) {
            (&Shape::Matrix(_, k1), &Shape::Matrix(k2, _)) if k1 == k2 => {}
            _ => {
                return Err(TapeError::Shape {
                    op: "matmul",
                    lhs: a.shape().clone(),
                    rhs: b.shape().clone(),
                })
            }
        }
        let out = a.matmul(b);
        drop(nodes);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn scalar_mul(self, k: f64) -> Value<'t> {
        let out = self.tape.with_value(self.id, |v| {
            let mut out = v.clone();
            out.scale(k);
            out
        });
        self.tape.push(out, Op::ScalarMul(self.id, k))
    }

    pub fn sum(self) -> Value<'t> {
        let s = self.tape.with_value(self.id, |v| v.data().iter().sum());
        self.tape.push(Arr::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Value<'t> {
        let s = self.tape.with_value(self.id, |v| {
            v.data().iter().sum::<f64>() / v.len() as f64
        });
        self.tape.push(Arr::scalar(s), Op::Mean(self.id))
    }

    fn row_reduce(self, op_name: &'static str, make: impl FnOnce(usize) -> Op, mean: bool) -> Result<Value<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            match *v.shape() {
                Shape::Matrix(r, c) => {
                    let mut out = vec![0.0; r];
                    for i in 0..r {
                        out[i] = v.row(i).iter().sum();
                        if mean {
                            out[i] /= c as f64;
                        }
                    }
                    Arr::vector(out)
                }
                ref other => {
                    return Err(TapeError::Rank { op: op_name, expected: "matrix", got: other.clone() })
                }
            }
        };
        Ok(self.tape.push(out, make(self.id)))
    }

    /// Per-row sum of a matrix, as a vector.
    pub fn row_sum(self) -> Result<Value<'t>> {
        self.row_reduce("row_sum", Op::RowSum, false)
    }

    /// Per-row mean of a matrix, as a vector.
    pub fn row_mean(self) -> Result<Value<'t>> {
        self.row_reduce("row_mean", Op::RowMean, true)
    }

    fn unary(self, make: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Value<'t> {
        let out = self.tape.with_value(self.id, |v| v.map(&f));
        self.tape.push(out, make(self.id))
    }

    pub fn square(self) -> Value<'t> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn sin(self) -> Value<'t> {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(self) -> Value<'t> {
        self.unary(Op::Cos, f64::cos)
    }

    pub fn exp(self) -> Value<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn silu(self) -> Value<'t> {
        self.unary(Op::Silu, |x| x * sigmoid(x))
    }

    /// Forward identity that blocks gradient flow to its parent.
    pub fn stop_gradient(self) -> Value<'t> {
        let out = self.data();
        self.tape.push(out, Op::StopGradient)
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Value<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            match *v.shape() {
                Shape::Matrix(r, c) => {
                    if start > end || end > c {
                        return Err(TapeError::Invalid {
                            op: "slice_cols",
                            detail: format!("range {start}..{end} out of 0..{c}"),
                        });
                    }
                    let w = end - start;
                    let mut data = vec![0.0; r * w];
                    for i in 0..r {
                        data[i * w..(i + 1) * w].copy_from_slice(&v.row(i)[start..end]);
                    }
                    Arr::matrix(r, w, data)
                }
                ref other => {
                    return Err(TapeError::Rank { op: "slice_cols", expected: "matrix", got: other.clone() })
                }
            }
        };
        Ok(self.tape.push(out, Op::SliceCols(self.id, start, end)))
    }

    /// Repeat a vector as each row of an `(rows, len)` matrix.
    pub fn broadcast_rows(self, rows: usize) -> Result<Value<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            match *v.shape() {
                Shape::Vector(c) => {
                    let mut data = Vec::with_capacity(rows * c);
                    for _ in 0..rows {
                        data.extend_from_slice(v.data());
                    }
                    Arr::matrix(rows, c, data)
                }
                ref other => {
                    return Err(TapeError::Rank { op: "broadcast_rows", expected: "vector", got: other.clone() })
                }
            }
        };
        Ok(self.tape.push(out, Op::BroadcastRows(self.id, rows)))
    }

    /// Scale row `i` of a matrix by element `i` of a vector.
    pub fn row_scale(self, scales: Value<'t>) -> Result<Value<'t>> {
        debug_assert!(std::ptr::eq(self.tape, scales.tape), "values from different tapes");
        let out = {
            let nodes = self.tape.nodes.borrow();
            let m = &nodes[self.id].value;
            let v = &nodes[scales.id].value;
            match (m.shape(), v.shape()) {
                (&Shape::Matrix(r, _), &Shape::Vector(n)) if r == n => {}
                (lhs, rhs) => {
                    return Err(TapeError::Shape {
                        op: "row_scale",
                        lhs: lhs.clone(),
                        rhs: rhs.clone(),
                    })
                }
            }
            let (r, _) = m.dims();
            let mut out = m.clone();
            for i in 0..r {
                let k = v.data()[i];
                for x in out.row_mut(i) {
                    *x *= k;
                }
            }
            out
        };
        Ok(self.tape.push(out, Op::RowScale(self.id, scales.id)))
    }

    /// Select rows of a table by index; duplicate indices are allowed and
    /// their gradients accumulate.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Value<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            match *v.shape() {
                Shape::Matrix(r, c) => {
                    if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
                        return Err(TapeError::Invalid {
                            op: "gather_rows",
                            detail: format!("row index {bad} out of 0..{r}"),
                        });
                    }
                    let mut data = Vec::with_capacity(indices.len() * c);
                    for &i in indices {
                        data.extend_from_slice(v.row(i));
                    }
                    Arr::matrix(indices.len(), c, data)
                }
                ref other => {
                    return Err(TapeError::Rank { op: "gather_rows", expected: "matrix", got: other.clone() })
                }
            }
        };
        Ok(self.tape.push(out, Op::GatherRows(self.id, indices.to_vec())))
    }

    /// Reverse sweep from a scalar root. Returns the gradient of the root
    /// with respect to every node on the tape.
    pub fn backward(self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.shape() != &Shape::Scalar {
            return Err(TapeError::NonScalarRoot { got: nodes[self.id].value.shape().clone() });
        }
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(Arr::scalar(1.0));
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            match nodes[id].op {
                Op::Leaf => {}
                Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    accum(&mut grads, a, g.matmul_nt(bv));
                    accum(&mut grads, b, av.matmul_tn(&g));
                }
                Op::Add(a, b) => {
                    accum(&mut grads, a, g.clone());
                    accum(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale(-1.0);
                    accum(&mut grads, a, g.clone());
                    accum(&mut grads, b, neg);
                }
                Op::Mul(a, b) => {
                    accum(&mut grads, a, hadamard(&g, &nodes[b].value));
                    accum(&mut grads, b, hadamard(&g, &nodes[a].value));
                }
                Op::ScalarMul(a, k) => {
                    let mut d = g.clone();
                    d.scale(k);
                    accum(&mut grads, a, d);
                }
                Op::Sum(a) => {
                    let k = g.item();
                    accum(&mut grads, a, constant_like(&nodes[a].value, k));
                }
                Op::Mean(a) => {
                    let k = g.item() / nodes[a].value.len() as f64;
                    accum(&mut grads, a, constant_like(&nodes[a].value, k));
                }
                Op::RowSum(a) => {
                    let (r, c) = nodes[a].value.dims();
                    let mut d = Arr::zeros(Shape::Matrix(r, c));
                    for i in 0..r {
                        d.row_mut(i).fill(g.data()[i]);
                    }
                    accum(&mut grads, a, d);
                }
                Op::RowMean(a) => {
                    let (r, c) = nodes[a].value.dims();
                    let mut d = Arr::zeros(Shape::Matrix(r, c));
                    for i in 0..r {
                        d.row_mut(i).fill(g.data()[i] / c as f64);
                    }
                    accum(&mut grads, a, d);
                }
                Op::Square(a) => {
                    let mut d = hadamard(&g, &nodes[a].value);
                    d.scale(2.0);
                    accum(&mut grads, a, d);
                }
                Op::Sin(a) => {
                    accum(&mut grads, a, zip_map(&g, &nodes[a].value, |gi, x| gi * x.cos()));
                }
                Op::Cos(a) => {
                    accum(&mut grads, a, zip_map(&g, &nodes[a].value, |gi, x| -gi * x.sin()));
                }
                Op::Exp(a) => {
                    // d exp(x) = exp(x); reuse the stored output.
                    accum(&mut grads, a, hadamard(&g, &nodes[id].value));
                }
                Op::Silu(a) => {
                    accum(&mut grads, a, zip_map(&g, &nodes[a].value, |gi, x| {
                        let s = sigmoid(x);
                        gi * s * (1.0 + x * (1.0 - s))
                    }));
                }
                Op::ConcatCols(ref parts) => {
                    let (rows, _) = nodes[id].value.dims();
                    let gcols = nodes[id].value.dims().1;
                    let mut at = 0;
                    for &p in parts {
                        let (_, c) = nodes[p].value.dims();
                        let mut d = Arr::zeros(Shape::Matrix(rows, c));
                        for i in 0..rows {
                            d.row_mut(i)
                                .copy_from_slice(&g.data()[i * gcols + at..i * gcols + at + c]);
                        }
                        accum(&mut grads, p, d);
                        at += c;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = nodes[a].value.dims();
                    let w = end - start;
                    let mut d = Arr::zeros(Shape::Matrix(r, c));
                    for i in 0..r {
                        d.row_mut(i)[start..end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accum(&mut grads, a, d);
                }
                Op::BroadcastRows(a, rows) => {
                    let c = nodes[a].value.len();
                    let mut d = vec![0.0; c];
                    for i in 0..rows {
                        for (dj, &gj) in d.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *dj += gj;
                        }
                    }
                    accum(&mut grads, a, Arr::vector(d));
                }
                Op::RowScale(a, s) => {
                    let m = &nodes[a].value;
                    let sv = &nodes[s].value;
                    let (r, c) = m.dims();
                    let mut dm = g.clone();
                    let mut ds = vec![0.0; r];
                    for i in 0..r {
                        let k = sv.data()[i];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        ds[i] = grow.iter().zip(m.row(i)).map(|(gi, mi)| gi * mi).sum();
                        for x in dm.row_mut(i) {
                            *x *= k;
                        }
                    }
                    accum(&mut grads, a, dm);
                    accum(&mut grads, s, Arr::vector(ds));
                }
                Op::GatherRows(a, ref indices) => {
                    let (r, c) = nodes[a].value.dims();
                    let mut d = Arr::zeros(Shape::Matrix(r, c));
                    for (pos, &i) in indices.iter().enumerate() {
                        let grow = &g.data()[pos * c..(pos + 1) * c];
                        for (dj, &gj) in d.row_mut(i).iter_mut().zip(grow) {
                            *dj += gj;
                        }
                    }
                    accum(&mut grads, a, d);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradient of a scalar root with respect to every tape node, indexed by
/// [`Value`] handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if the root does not depend
    /// on it.
    pub fn wrt(&self, v: Value<'_>) -> Option<&Arr> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, densified to zeros when absent.
    pub fn wrt_or_zero(&self, v: Value<'_>) -> Arr {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Arr::zeros(v.shape()),
        }
    }
}

fn accum(grads: &mut [Option<Arr>], id: usize, contrib: Arr) {
    match &mut grads[id] {
        Some(g) => g.axpy(1.0, &contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn hadamard(a: &Arr, b: &Arr) -> Arr {
    let mut out = a.clone();
    for (x, &y) in out.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
    out
}

fn zip_map(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let mut out = a.clone();
    for (x, &y) in out.data_mut().iter_mut().zip(b.data()) {
        *x = f(*x, y);
    }
    out
}

fn constant_like(template: &Arr, v: f64) -> Arr {
    let mut out = Arr::zeros(template.shape().clone());
    out.data_mut().fill(v);
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference of `f` at `inputs`, perturbing every element
    /// of every input. `f` rebuilds the computation from plain arrays, so any
    /// branch that should be frozen must be baked into the closure.
    fn finite_diff(f: &dyn Fn(&[Arr]) -> f64, inputs: &[Arr], h: f64) -> Vec<Arr> {
        let mut out = Vec::new();
        for (which, input) in inputs.iter().enumerate() {
            let mut g = Arr::zeros(input.shape().clone());
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[e] -= h;
                g.data_mut()[e] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn max_rel_err(analytic: &Arr, fd: &Arr) -> f64 {
        analytic
            .data()
            .iter()
            .zip(fd.data())
            .map(|(&a, &b)| (a - b).abs() / (a.abs().max(b.abs()) + 1e-6))
            .fold(0.0, f64::max)
    }

    /// Asserts tape gradients match central finite differences (h=1e-5)
    /// elementwise with relative error below 1e-6.
    fn check_against_fd(build: &dyn for<'t> Fn(&'t Tape, &[Value<'t>]) -> Value<'t>, inputs: &[Arr]) {
        let tape = Tape::new();
        let vals: Vec<Value> = inputs.iter().map(|a| tape.input(a.clone())).collect();
        let root = build(&tape, &vals);
        let grads = root.backward().unwrap();

        let f = |xs: &[Arr]| {
            let t = Tape::new();
            let vs: Vec<Value> = xs.iter().map(|a| t.input(a.clone())).collect();
            build(&t, &vs).item()
        };
        let fd = finite_diff(&f, inputs, 1e-5);
        for (v, fd_g) in vals.iter().zip(&fd) {
            let g = grads.wrt_or_zero(*v);
            let err = max_rel_err(&g, fd_g);
            assert!(err < 1e-6, "gradient mismatch: rel err {err:.3e}");
        }
    }

    fn arr_mat(r: usize, c: usize, seed: f64) -> Arr {
        // Deterministic pseudo-random entries in roughly [-1, 1].
        Arr::from_rows(r, c, |i, row| {
            for (j, x) in row.iter_mut().enumerate() {
                *x = ((i * 31 + j * 17) as f64 * 0.7391 + seed).sin();
            }
        })
    }

    #[test]
    fn square_matmul_composite_matches_fd() {
        // y = sum((W . x)^2), the canonical matmul + square chain.
        let w = arr_mat(3, 4, 0.3);
        let x = arr_mat(4, 2, 1.1);
        check_against_fd(
            &|_t, vs| vs[0].matmul(vs[1]).unwrap().square().sum(),
            &[w, x],
        );
    }

    #[test]
    fn elementwise_chain_matches_fd() {
        // y = mean(sin(x) * exp(cos(x)) + silu(x))
        let x = arr_mat(5, 3, 2.0);
        check_against_fd(
            &|_t, vs| {
                let s = vs[0].sin().mul(vs[0].cos().exp()).unwrap();
                s.add(vs[0].silu()).unwrap().mean()
            },
            &[x],
        );
    }

    #[test]
    fn add_sub_scalar_mul_matches_fd() {
        let a = arr_mat(4, 4, 0.0);
        let b = arr_mat(4, 4, 5.0);
        check_against_fd(
            &|_t, vs| vs[0].sub(vs[1].scalar_mul(0.37)).unwrap().square().sum(),
            &[a, b],
        );
    }

    #[test]
    fn structural_ops_matches_fd() {
        // concat -> slice -> broadcast add -> row_scale -> row_mean -> sum
        let a = arr_mat(3, 2, 0.9);
        let b = arr_mat(3, 3, 1.7);
        let bias = Arr::vector(vec![0.2, -0.4, 0.6, 0.1]);
        let scales = Arr::vector(vec![1.5, -0.7, 0.3]);
        check_against_fd(
            &|t, vs| {
                let cat = t.concat_cols(&[vs[0], vs[1]]).unwrap();
                let sl = cat.slice_cols(1, 5).unwrap();
                let wide = sl.add(vs[2].broadcast_rows(3).unwrap()).unwrap();
                let scaled = wide.row_scale(vs[3]).unwrap();
                scaled.silu().row_mean().unwrap().square().sum()
            },
            &[a, b, bias, scales],
        );
    }

    #[test]
    fn gather_accumulates_duplicate_rows() {
        let table = arr_mat(4, 3, 0.25);
        // Row 2 appears twice: its gradient must be the sum of both uses.
        let idx = vec![2usize, 0, 2];
        check_against_fd(
            &|_t, vs| vs[0].gather_rows(&[2, 0, 2]).unwrap().square().sum(),
            &[table.clone()],
        );

        let tape = Tape::new();
        let tb = tape.input(table);
        let y = tb.gather_rows(&idx).unwrap().sum();
        let g = y.backward().unwrap().wrt_or_zero(tb);
        assert_eq!(g.row(0), &[1.0, 1.0, 1.0]);
        assert_eq!(g.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(g.row(2), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn row_reductions_match_fd() {
        let x = arr_mat(4, 3, 3.0);
        check_against_fd(&|_t, vs| vs[0].row_sum().unwrap().square().sum(), &[x.clone()]);
        check_against_fd(&|_t, vs| vs[0].row_mean().unwrap().square().sum(), &[x]);
    }

    #[test]
    fn stop_gradient_blocks_parent_path() {
        // y = sum(x * stop(x)): the stopped branch is a constant, so the
        // gradient is x itself rather than 2x.
        let x = Arr::vector(vec![1.5, -2.0, 0.25]);
        let tape = Tape::new();
        let v = tape.input(x.clone());
        let y = v.mul(v.stop_gradient()).unwrap().sum();
        let g = y.backward().unwrap().wrt_or_zero(v);
        assert_eq!(g.data(), x.data());

        // Finite differences over the live branch only (frozen copy baked in).
        let frozen = x.clone();
        let f = |xs: &[Arr]| {
            let t = Tape::new();
            let live = t.input(xs[0].clone());
            let cst = t.input(frozen.clone());
            live.mul(cst).unwrap().sum().item()
        };
        let fd = finite_diff(&f, &[x], 1e-5);
        assert!(max_rel_err(&g, &fd[0]) < 1e-6);
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let x = arr_mat(2, 2, 7.0);
        let tape = Tape::new();
        let v = tape.input(x.clone());
        assert_eq!(v.stop_gradient().data(), x);
    }

    #[test]
    fn backward_is_deterministic() {
        let w = arr_mat(6, 6, 0.1);
        let x = arr_mat(6, 2, 4.2);
        let run = || {
            let tape = Tape::new();
            let wv = tape.input(w.clone());
            let xv = tape.input(x.clone());
            let y = wv.matmul(xv).unwrap().silu().square().mean();
            let g = y.backward().unwrap();
            (g.wrt_or_zero(wv), g.wrt_or_zero(xv))
        };
        let (g1w, g1x) = run();
        let (g2w, g2x) = run();
        // Bitwise equality, not approximate.
        assert_eq!(g1w, g2w);
        assert_eq!(g1x, g2x);
    }

    #[test]
    fn unused_input_has_no_gradient() {
        let tape = Tape::new();
        let a = tape.input(Arr::vector(vec![1.0, 2.0]));
        let b = tape.input(Arr::vector(vec![3.0, 4.0]));
        let y = a.square().sum();
        let g = y.backward().unwrap();
        assert!(g.wrt(b).is_none());
        assert_eq!(g.wrt_or_zero(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.input(Arr::vector(vec![1.0, 2.0]));
        let b = tape.input(Arr::vector(vec![1.0, 2.0, 3.0]));
        let err = a.add(b).unwrap_err();
        assert_eq!(
            err,
            TapeError::Shape { op: "add", lhs: Shape::Vector(2), rhs: Shape::Vector(3) }
        );
        let m = tape.input(Arr::matrix(2, 3, vec![0.0; 6]));
        assert!(matches!(m.matmul(m).unwrap_err(), TapeError::Shape { op: "matmul", .. }));
        assert!(matches!(a.row_sum().unwrap_err(), TapeError::Rank { op: "row_sum", .. }));
        assert!(matches!(
            m.slice_cols(2, 5).unwrap_err(),
            TapeError::Invalid { op: "slice_cols", .. }
        ));
        assert!(matches!(
            m.gather_rows(&[5]).unwrap_err(),
            TapeError::Invalid { op: "gather_rows", .. }
        ));
        assert!(matches!(m.backward().unwrap_err(), TapeError::NonScalarRoot { .. }));
    }

    #[test]
    fn sum_and_mean_gradients_are_exact() {
        let tape = Tape::new();
        let x = tape.input(Arr::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let gs = x.sum().backward().unwrap().wrt_or_zero(x);
        assert_eq!(gs.data(), &[1.0; 4]);
        let gm = x.mean().backward().unwrap().wrt_or_zero(x);
        assert_eq!(gm.data(), &[0.25; 4]);
    }
}
