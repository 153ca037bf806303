//! Reverse-mode gradient tape over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep. Every
//! operation is one of a closed set of primitives, each with a hand-written
//! adjoint.
//!
//! ```
//! use sda_core::numerics::{Matrix, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.param("x", &Matrix::scalar(3.0));
//! let y = tape.mul(x, x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use crate::error::{Result, SdaError};
use crate::numerics::prob::{log_softmax_rows, softmax_rows, PROB_FLOOR};
use crate::numerics::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Log(Var),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    MeanPool(Var, usize),
    Dot(Var, Var),
    L2NormalizeRows(Var),
    Element(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    GroupDot(Var, Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records primitive operations for a single backward pass.
///
/// Single-threaded by construction (`RefCell`); build one per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, Var>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to a node; exactly zero when the node does not
    /// reach the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.by_node[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Gradient of a named parameter.
    pub fn get(&self, name: &str) -> Option<Matrix> {
        self.params.get(name).map(|&v| self.wrt(v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Named gradients in name order.
    pub fn named(&self) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .map(|(k, &v)| (k.clone(), self.wrt(v)))
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Borrow a node's value.
    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.get(0, 0)
    }

    /// Registers a trainable leaf under a stable name. A name registered
    /// twice returns the original node, so a parameter used by several
    /// sub-graphs accumulates one gradient.
    pub fn param(&self, name: &str, value: &Matrix) -> Var {
        if let Some(&v) = self.params.borrow().get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.borrow().get(name).copied()
    }

    /// A leaf that is not tracked as a parameter.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A constant copy of `v`; gradients do not flow through it.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Matrix, &Matrix) -> Matrix, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, op)
    }

    fn check(&self, ok: bool, what: impl FnOnce() -> String) {
        assert!(ok, "tape shape error: {}", what());
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check(sa.1 == sb.0, || format!("matmul {sa:?} x {sb:?}"));
        self.binary(a, b, |x, y| x.matmul_unchecked(y), Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Matrix::transpose, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check(sa == sb, || format!("add {sa:?} + {sb:?}"));
        self.binary(
            a,
            b,
            |x, y| {
                let mut out = x.clone();
                out.add_assign_unchecked(y);
                out
            },
            Op::Add(a, b),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a 1xC row to every row of an RxC matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (sa, sr) = (self.shape(a), self.shape(row));
        self.check(sr.0 == 1 && sr.1 == sa.1, || format!("add_row {sa:?} + {sr:?}"));
        self.binary(
            a,
            row,
            |x, r| {
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            },
            Op::AddRow(a, row),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check(sa == sb, || format!("mul {sa:?} * {sb:?}"));
        self.binary(
            a,
            b,
            |x, y| x.zip_map(y, |p, q| p * q).expect("shape checked"),
            Op::Mul(a, b),
        )
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x.scale(factor), Op::Scale(a, factor))
    }

    /// Multiplies `a` by the value of the 1x1 node `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let ss = self.shape(s);
        self.check(ss == (1, 1), || format!("scale_by expects 1x1, got {ss:?}"));
        self.binary(a, s, |x, k| x.scale(k.get(0, 0)), Op::ScaleBy(a, s))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::tanh), Op::Tanh(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, softmax_rows, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        self.unary(a, log_softmax_rows, Op::LogSoftmaxRows(a))
    }

    /// Natural log with inputs floored at [`PROB_FLOOR`]; floored entries
    /// receive zero gradient.
    pub fn log(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(|v| v.max(PROB_FLOOR).ln()), Op::Log(a))
    }

    /// `ln σ(x)`, computed without overflow.
    pub fn log_sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(log_sigmoid), Op::LogSigmoid(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Matrix::scalar(x.sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| Matrix::scalar(x.sum() / x.len().max(1) as f64),
            Op::Mean(a),
        )
    }

    /// Averages consecutive groups of `group` rows: (G·R)xC -> RxC.
    pub fn mean_pool(&self, a: Var, group: usize) -> Var {
        let sa = self.shape(a);
        self.check(group > 0 && sa.0 % group == 0, || {
            format!("mean_pool of {} rows in groups of {group}", sa.0)
        });
        self.unary(
            a,
            |x| {
                let out_rows = x.rows() / group;
                let mut out = Matrix::zeros(out_rows, x.cols());
                let inv = 1.0 / group as f64;
                for r in 0..out_rows {
                    let dst = out.row_mut(r);
                    for k in 0..group {
                        for (d, s) in dst.iter_mut().zip(x.row(r * group + k)) {
                            *d += s;
                        }
                    }
                    for d in dst.iter_mut() {
                        *d *= inv;
                    }
                }
                out
            },
            Op::MeanPool(a, group),
        )
    }

    /// Full inner product `Σ a⊙b` as a 1x1 node.
    pub fn dot(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check(sa == sb, || format!("dot {sa:?} . {sb:?}"));
        self.binary(
            a,
            b,
            |x, y| Matrix::scalar(x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum()),
            Op::Dot(a, b),
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = x.clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let n = row_norm(row);
                    for v in row.iter_mut() {
                        *v /= n;
                    }
                }
                out
            },
            Op::L2NormalizeRows(a),
        )
    }

    /// The single entry `(r, c)` as a 1x1 node.
    pub fn element(&self, a: Var, r: usize, c: usize) -> Var {
        self.unary(a, |x| Matrix::scalar(x.get(r, c)), Op::Element(a, r, c))
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Var {
        let st = self.shape(table);
        self.check(indices.iter().all(|&i| i < st.0), || {
            format!("gather_rows index out of range for {} rows", st.0)
        });
        let idx = indices.to_vec();
        self.unary(table, |x| x.select_rows(indices), Op::GatherRows(table, idx))
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check(sa.0 == sb.0, || format!("concat_cols {sa:?} | {sb:?}"));
        self.binary(
            a,
            b,
            |x, y| {
                let mut out = Matrix::zeros(x.rows(), x.cols() + y.cols());
                for r in 0..x.rows() {
                    let dst = out.row_mut(r);
                    dst[..x.cols()].copy_from_slice(x.row(r));
                    dst[x.cols()..].copy_from_slice(y.row(r));
                }
                out
            },
            Op::ConcatCols(a, b),
        )
    }

    /// `out[p, j] = h[p] · c[p*k + j]`: each row of `h` scored against its own
    /// block of `k` candidate rows.
    pub fn group_dot(&self, h: Var, candidates: Var, k: usize) -> Var {
        let (sh, sc) = (self.shape(h), self.shape(candidates));
        self.check(sc.0 == sh.0 * k && sc.1 == sh.1, || {
            format!("group_dot {sh:?} against {sc:?} with k={k}")
        });
        self.binary(
            h,
            candidates,
            |x, c| {
                let mut out = Matrix::zeros(x.rows(), k);
                for p in 0..x.rows() {
                    for j in 0..k {
                        let v = x.row(p).iter().zip(c.row(p * k + j)).map(|(a, b)| a * b).sum();
                        out.set(p, j, v);
                    }
                }
                out
            },
            Op::GroupDot(h, candidates, k),
        )
    }

    /// Reverse sweep from a 1x1 `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.shape() != (1, 1) {
            return Err(SdaError::Shape(format!(
                "backward requires a 1x1 loss, got {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_unchecked(&val(*b).transpose());
                    let gb = val(*a).transpose().matmul_unchecked(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, r) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for row in 0..g.rows() {
                        for (d, s) in gr.data_mut().iter_mut().zip(g.row(row)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *r, gr);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), |p, q| p * q).expect("shape");
                    let gb = g.zip_map(val(*a), |p, q| p * q).expect("shape");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f)),
                Op::ScaleBy(a, s) => {
                    let k = val(*s).get(0, 0);
                    let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                    accumulate(&mut grads, *a, g.scale(k));
                    accumulate(&mut grads, *s, Matrix::scalar(gs));
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)).expect("shape");
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for ((d, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for ((d, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = gv - yv.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g
                        .zip_map(val(*a), |gv, x| if x > PROB_FLOOR { gv / x } else { 0.0 })
                        .expect("shape");
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    let ga = g
                        .zip_map(val(*a), |gv, x| gv * sigmoid(-x))
                        .expect("shape");
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = (r * c).max(1) as f64;
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0) / n));
                }
                Op::MeanPool(a, group) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    let inv = 1.0 / *group as f64;
                    for row in 0..r {
                        for (d, s) in ga.row_mut(row).iter_mut().zip(g.row(row / group)) {
                            *d = s * inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Dot(a, b) => {
                    let k = g.get(0, 0);
                    accumulate(&mut grads, *a, val(*b).scale(k));
                    accumulate(&mut grads, *b, val(*a).scale(k));
                }
                Op::L2NormalizeRows(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = row_norm(x.row(r));
                        let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for ((d, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = (gv - yv * inner) / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Element(a, r, c) => {
                    let (rows, cols) = val(*a).shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    ga.set(*r, *c, g.get(0, 0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(t, idx) => {
                    let (rows, cols) = val(*t).shape();
                    let mut gt = Matrix::zeros(rows, cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, s) in gt.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *t, gt);
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).cols();
                    let cb = val(*b).cols();
                    let mut ga = Matrix::zeros(g.rows(), ca);
                    let mut gb = Matrix::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::GroupDot(h, c, k) => {
                    let (hv, cv) = (val(*h), val(*c));
                    let mut gh = Matrix::zeros(hv.rows(), hv.cols());
                    let mut gc = Matrix::zeros(cv.rows(), cv.cols());
                    for p in 0..hv.rows() {
                        for j in 0..*k {
                            let w = g.get(p, j);
                            if w == 0.0 {
                                continue;
                            }
                            let crow = p * k + j;
                            for (d, s) in gh.row_mut(p).iter_mut().zip(cv.row(crow)) {
                                *d += w * s;
                            }
                            for (d, s) in gc.row_mut(crow).iter_mut().zip(hv.row(p)) {
                                *d += w * s;
                            }
                        }
                    }
                    accumulate(&mut grads, *h, gh);
                    accumulate(&mut grads, *c, gc);
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            shapes: nodes.iter().map(|n| n.value.shape()).collect(),
            by_node: grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign_unchecked(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param("x", &Matrix::scalar(3.0));
        let y = tape.mul(x, x);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(tape.scalar(loss), 9.0);
        assert_eq!(g.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn unreachable_param_has_exact_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param("x", &Matrix::scalar(2.0));
        let _unused = tape.param("w", &Matrix::filled(2, 3, 7.0));
        let loss = tape.sum(tape.tanh(x));
        let g = tape.backward(loss).unwrap();
        let gw = g.get("w").unwrap();
        assert_eq!(gw.shape(), (2, 3));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_param_accumulates() {
        let tape = Tape::new();
        let a = tape.param("a", &Matrix::scalar(1.5));
        let again = tape.param("a", &Matrix::scalar(100.0));
        assert_eq!(a, again);
        let loss = tape.sum(tape.add(tape.scale(a, 2.0), tape.scale(again, 3.0)));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("a").unwrap().data(), &[5.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.param("x", &Matrix::scalar(2.0));
        let d = tape.detach(x);
        let loss = tape.sum(tape.mul(x, d));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param("x", &Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + 2.0_f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
