//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every vector-Jacobian product is itself expressed with tape ops, so the
//! gradients returned by [`Tape::grad`] with `create_graph = true` can be
//! differentiated again. Score-matching losses rely on this: they contain
//! `∂E/∂x` and are differentiated with respect to the parameters.
//!
//! Nodes are appended in creation order, which is a topological order. A
//! backward pass walks indices downward from the root and only visits nodes
//! that depend on one of the requested inputs.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Operation kind of a tape node, without operand references.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpTag {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddScalar,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Tanh,
    Abs,
    Sum,
    Mean,
    SqNorm,
    MatMul,
    Transpose,
    ExpandRows,
    SumRows,
    ExpandCols,
    SumCols,
    SliceCols,
    PadCols,
    ConcatCols,
    ExpandScalar,
    Slogdet,
    InverseTranspose,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    SqNorm(usize),
    /// `op(a) · op(b)` with transpose flags.
    MatMul(usize, usize, bool, bool),
    Transpose(usize),
    ExpandRows(usize),
    SumRows(usize),
    ExpandCols(usize),
    SumCols(usize),
    SliceCols { src: usize, start: usize },
    PadCols { src: usize, start: usize },
    ConcatCols(usize, usize),
    ExpandScalar(usize),
    Slogdet(usize),
    InverseTranspose(usize),
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Constant => OpTag::Constant,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Mul(..) => OpTag::Mul,
            Op::Div(..) => OpTag::Div,
            Op::Neg(_) => OpTag::Neg,
            Op::Scale(..) => OpTag::Scale,
            Op::AddScalar(_) => OpTag::AddScalar,
            Op::Exp(_) => OpTag::Exp,
            Op::Log(_) => OpTag::Log,
            Op::Softplus(_) => OpTag::Softplus,
            Op::Sigmoid(_) => OpTag::Sigmoid,
            Op::Tanh(_) => OpTag::Tanh,
            Op::Abs(_) => OpTag::Abs,
            Op::Sum(_) => OpTag::Sum,
            Op::Mean(_) => OpTag::Mean,
            Op::SqNorm(_) => OpTag::SqNorm,
            Op::MatMul(..) => OpTag::MatMul,
            Op::Transpose(_) => OpTag::Transpose,
            Op::ExpandRows(_) => OpTag::ExpandRows,
            Op::SumRows(_) => OpTag::SumRows,
            Op::ExpandCols(_) => OpTag::ExpandCols,
            Op::SumCols(_) => OpTag::SumCols,
            Op::SliceCols { .. } => OpTag::SliceCols,
            Op::PadCols { .. } => OpTag::PadCols,
            Op::ConcatCols(..) => OpTag::ConcatCols,
            Op::ExpandScalar(_) => OpTag::ExpandScalar,
            Op::Slogdet(_) => OpTag::Slogdet,
            Op::InverseTranspose(_) => OpTag::InverseTranspose,
        }
    }

    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf | Constant => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b, ..) | ConcatCols(a, b) => {
                [Some(a), Some(b)]
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Softplus(a) | Sigmoid(a)
            | Tanh(a) | Abs(a) | Sum(a) | Mean(a) | SqNorm(a) | Transpose(a) | ExpandRows(a)
            | SumRows(a) | ExpandCols(a) | SumCols(a) | ExpandScalar(a) | Slogdet(a)
            | InverseTranspose(a) => [Some(a), None],
            SliceCols { src, .. } | PadCols { src, .. } => [Some(src), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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
        self.len() == 0
    }

    /// Differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Multiset of op tags currently on the tape.
    pub fn op_counts(&self) -> BTreeMap<OpTag, usize> {
        let mut m = BTreeMap::new();
        for n in self.nodes.borrow().iter() {
            *m.entry(n.op.tag()).or_insert(0) += 1;
        }
        m
    }

    pub fn contains_op(&self, tag: OpTag) -> bool {
        self.nodes.borrow().iter().any(|n| n.op.tag() == tag)
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents()
                .iter()
                .flatten()
                .any(|&p| nodes[p].requires_grad)
        };
        self.push_raw(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn at(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of a scalar `root` with respect to each of `wrt`.
    ///
    /// With `create_graph` the results stay attached to the tape and can be
    /// differentiated again; otherwise they are detached constants. Inputs
    /// that `root` does not depend on get a zero gradient of matching shape.
    pub fn grad<'t>(
        &'t self,
        root: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        let root_val = root.value();
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let n = root.id + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !relevant[i] {
                    relevant[i] = nodes[i].op.parents().iter().flatten().any(|&p| relevant[p]);
                }
            }
        }

        let mut adj: Vec<Option<Var<'t>>> = vec![None; n];
        if relevant[root.id] {
            adj[root.id] = Some(self.constant(Tensor::ones(root_val.shape())));
        }
        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let parents = op.parents();
            let need = [
                parents[0].is_some_and(|p| relevant[p]),
                parents[1].is_some_and(|p| relevant[p]),
            ];
            if !need[0] && !need[1] {
                continue;
            }
            let contribs = self.vjp(&op, i, g, need)?;
            for (slot, c) in contribs.into_iter().enumerate() {
                let (Some(p), Some(c)) = (parents[slot], c) else {
                    continue;
                };
                adj[p] = Some(match adj[p] {
                    None => c,
                    Some(prev) => prev.add(c)?,
                });
            }
        }

        wrt.iter()
            .map(|w| {
                let g = match adj.get(w.id).copied().flatten() {
                    Some(g) => g,
                    None => return Ok(self.constant(Tensor::zeros(w.value().shape()))),
                };
                Ok(if create_graph {
                    g
                } else {
                    self.constant((*g.value()).clone())
                })
            })
            .collect()
    }

    fn vjp<'t>(
        &'t self,
        op: &Op,
        out_id: usize,
        g: Var<'t>,
        need: [bool; 2],
    ) -> Result<[Option<Var<'t>>; 2]> {
        let out = self.at(out_id);
        let v = |id| self.at(id);
        Ok(match *op {
            Op::Leaf | Op::Constant => [None, None],
            Op::Add(..) => [need[0].then_some(g), need[1].then_some(g)],
            Op::Sub(..) => [need[0].then_some(g), need[1].then(|| g.neg())],
            Op::Mul(a, b) => [
                if need[0] { Some(g.mul(v(b))?) } else { None },
                if need[1] { Some(g.mul(v(a))?) } else { None },
            ],
            Op::Div(_, b) => [
                if need[0] { Some(g.div(v(b))?) } else { None },
                if need[1] {
                    Some(g.mul(out)?.div(v(b))?.neg())
                } else {
                    None
                },
            ],
            Op::Neg(_) => [Some(g.neg()), None],
            Op::Scale(_, c) => [Some(g.scale(c)), None],
            Op::AddScalar(_) => [Some(g), None],
            Op::Exp(_) => [Some(g.mul(out)?), None],
            Op::Log(a) => [Some(g.div(v(a))?), None],
            Op::Softplus(a) => [Some(g.mul(v(a).sigmoid())?), None],
            Op::Sigmoid(_) => {
                let d = out.mul(out.neg().add_scalar(1.0))?;
                [Some(g.mul(d)?), None]
            }
            Op::Tanh(_) => {
                let d = out.mul(out)?.neg().add_scalar(1.0);
                [Some(g.mul(d)?), None]
            }
            Op::Abs(a) => {
                let sign = self.constant(self.value(a).map(f64::signum));
                [Some(g.mul(sign)?), None]
            }
            Op::Sum(a) => [Some(g.expand_scalar(self.value(a).shape())), None],
            Op::Mean(a) => {
                let val = self.value(a);
                let scaled = g.scale(1.0 / val.len() as f64);
                [Some(scaled.expand_scalar(val.shape())), None]
            }
            Op::SqNorm(a) => {
                let e = g.expand_scalar(self.value(a).shape());
                [Some(e.mul(v(a))?.scale(2.0)), None]
            }
            Op::MatMul(a, b, ta, tb) => {
                let (va, vb) = (v(a), v(b));
                let (da, db) = match (ta, tb) {
                    (false, false) => ((g, vb, false, true), (va, g, true, false)),
                    (false, true) => ((g, vb, false, false), (g, va, true, false)),
                    (true, false) => ((vb, g, false, true), (va, g, false, false)),
                    (true, true) => ((vb, g, true, true), (g, va, true, true)),
                };
                let mm = |(x, y, tx, ty): (Var<'t>, Var<'t>, bool, bool)| x.matmul_t(y, tx, ty);
                [
                    if need[0] { Some(mm(da)?) } else { None },
                    if need[1] { Some(mm(db)?) } else { None },
                ]
            }
            Op::Transpose(_) => [Some(g.transpose()?), None],
            Op::ExpandRows(_) => [Some(g.sum_rows()?), None],
            Op::SumRows(a) => [Some(g.expand_rows(self.value(a).rows())?), None],
            Op::ExpandCols(_) => [Some(g.sum_cols()?), None],
            Op::SumCols(a) => [Some(g.expand_cols(self.value(a).cols())?), None],
            Op::SliceCols { src, start } => {
                [Some(g.pad_cols(start, self.value(src).cols())?), None]
            }
            Op::PadCols { src, start } => {
                let w = self.value(src).cols();
                [Some(g.slice_cols(start, start + w)?), None]
            }
            Op::ConcatCols(a, b) => {
                let wa = self.value(a).cols();
                let wb = self.value(b).cols();
                [
                    if need[0] { Some(g.slice_cols(0, wa)?) } else { None },
                    if need[1] {
                        Some(g.slice_cols(wa, wa + wb)?)
                    } else {
                        None
                    },
                ]
            }
            Op::ExpandScalar(a) => {
                let shape = self.value(a).shape().to_vec();
                let total = g.sum();
                if shape.is_empty() {
                    [Some(total), None]
                } else {
                    [Some(total.expand_scalar(&shape)), None]
                }
            }
            Op::Slogdet(a) => {
                let wa = v(a);
                let inv_t = wa.inverse_transpose()?;
                let ge = g.expand_scalar(wa.value().shape());
                [Some(inv_t.mul(ge)?), None]
            }
            Op::InverseTranspose(_) => {
                // d(W^{-T}) = -Y dWᵀ Y with Y = W^{-T}; pulled back: -Y gᵀ Y
                let y = out;
                [Some(y.matmul(g.transpose()?)?.matmul(y)?.neg()), None]
            }
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn op_tag(&self) -> OpTag {
        self.tape.nodes.borrow()[self.id].op.tag()
    }

    /// Detached copy of this value.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let val = self.value().map(f);
        self.tape.push(val, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let val = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.tape.push(val, op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div(self.id, other.id), "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// Elementwise affine map `a·x + b`.
    pub fn affine(&self, a: f64, b: f64) -> Var<'t> {
        self.scale(a).add_scalar(b)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// `log(1 + eʸ)`.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let s = self.value().mean();
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Squared L2 norm over all elements.
    pub fn sq_norm(&self) -> Var<'t> {
        let s = self.value().sq_norm();
        self.tape.push(Tensor::scalar(s), Op::SqNorm(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)`, transposing an operand when its flag is set.
    pub fn matmul_t(&self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let val = self.value().matmul_t(&other.value(), ta, tb)?;
        Ok(self.tape.push(val, Op::MatMul(self.id, other.id, ta, tb)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let val = self.value().transpose()?;
        Ok(self.tape.push(val, Op::Transpose(self.id)))
    }

    /// `[d] → [n, d]`, repeating the vector as every row.
    pub fn expand_rows(&self, n: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let d = v.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![n, d], data), Op::ExpandRows(self.id)))
    }

    /// `[n, d] → [d]`, summing over rows.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 {
            return Err(mismatch("sum_rows", &v, &v));
        }
        let d = v.cols();
        let mut out = vec![0.0; d];
        for r in v.data().chunks_exact(d.max(1)) {
            for (o, x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
        Ok(self.tape.push(Tensor::vector(out), Op::SumRows(self.id)))
    }

    /// `[n] → [n, d]`, repeating each entry across its row.
    pub fn expand_cols(&self, d: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let n = v.len();
        let mut data = Vec::with_capacity(n * d);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, d));
        }
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![n, d], data), Op::ExpandCols(self.id)))
    }

    /// `[n, d] → [n]`, summing each row.
    pub fn sum_cols(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 {
            return Err(mismatch("sum_cols", &v, &v));
        }
        let d = v.cols();
        let out: Vec<f64> = if d == 0 {
            vec![0.0; v.rows()]
        } else {
            v.data().chunks_exact(d).map(|r| r.iter().sum()).collect()
        };
        Ok(self.tape.push(Tensor::vector(out), Op::SumCols(self.id)))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let val = self.value().slice_cols(start, end)?;
        Ok(self.tape.push(
            val,
            Op::SliceCols {
                src: self.id,
                start,
            },
        ))
    }

    /// Embeds `[n, w]` into zeros of shape `[n, total]` starting at column `start`.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (n, w) = (v.rows(), v.cols());
        if v.ndim() != 2 || start + w > total {
            return Err(Error::ShapeMismatch {
                op: "pad_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, total],
            });
        }
        let mut data = vec![0.0; n * total];
        for i in 0..n {
            data[i * total + start..i * total + start + w].copy_from_slice(v.row(i));
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![n, total], data),
            Op::PadCols {
                src: self.id,
                start,
            },
        ))
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Result<Var<'t>> {
        let val = self.value().concat_cols(&other.value())?;
        Ok(self.tape.push(val, Op::ConcatCols(self.id, other.id)))
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value().item();
        self.tape
            .push(Tensor::full(shape, x), Op::ExpandScalar(self.id))
    }

    /// `log|det W|` of a square matrix.
    pub fn slogdet(&self) -> Result<Var<'t>> {
        let (_, logabs) = linalg::slogdet(&self.value())?;
        Ok(self
            .tape
            .push(Tensor::scalar(logabs), Op::Slogdet(self.id)))
    }

    /// `(Wᵀ)⁻¹`.
    pub fn inverse_transpose(&self) -> Result<Var<'t>> {
        let val = linalg::inverse_transpose(&self.value())?;
        Ok(self.tape.push(val, Op::InverseTranspose(self.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_sq_norm_gradient_is_identity() {
        let t = Tape::new();
        let x = t.var(Tensor::vector(vec![3.0, 4.0]));
        let f = x.sq_norm().scale(0.5);
        let g = t.grad(f, &[x], false).unwrap();
        assert_eq!(g[0].value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn constant_root_gives_zero_gradient() {
        let t = Tape::new();
        let x = t.var(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![5.0, 6.0]));
        let g = t.grad(c.sum(), &[x], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn hessian_vector_product_of_quadratic() {
        let t = Tape::new();
        let x = t.var(Tensor::vector(vec![0.3, -1.2]));
        let v = t.constant(Tensor::vector(vec![0.7, 2.0]));
        let f = x.sq_norm().scale(0.5);
        let gx = t.grad(f, &[x], true).unwrap()[0];
        let gv = gx.mul(v).unwrap().sum();
        let hv = t.grad(gv, &[x], false).unwrap()[0];
        assert_eq!(hv.value().data(), &[0.7, 2.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let t = Tape::new();
        let x = t.var(Tensor::scalar(1.5));
        let y = x.add(x).unwrap();
        let g = t.grad(y, &[x], false).unwrap();
        assert_eq!(g[0].item(), 2.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let t = Tape::new();
        let x = t.var(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            t.grad(x.exp(), &[x], false),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn forward_examples() {
        let t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let sp = t.scalar(0.0).softplus().item();
        assert!((sp - 2f64.ln()).abs() < 1e-15);
        let ld = t.constant(Tensor::diag(&[2.0, 3.0])).slogdet().unwrap().item();
        assert!((ld - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_error_names_operands() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        match a.add(b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn detached_gradients_do_not_require_grad() {
        let t = Tape::new();
        let x = t.var(Tensor::vector(vec![1.0]));
        let g = t.grad(x.exp().sum(), &[x], false).unwrap()[0];
        assert!(!g.requires_grad());
        let g2 = t.grad(x.exp().sum(), &[x], true).unwrap()[0];
        assert!(g2.requires_grad());
    }
}
