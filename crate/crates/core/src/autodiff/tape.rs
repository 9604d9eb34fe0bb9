//! Gradient tape over [`Tensor`] values with forward-mode tangents.
//!
//! Every operation is appended to a [`Tape`] as a node. A node may carry a
//! *tangent*: the directional derivative of its value along a direction seeded
//! with [`Tape::seed`]. Tangents are built from ordinary tape operations, so a
//! single reverse sweep differentiates expressions that contain directional
//! derivatives (forward-over-reverse). Tangents of tangents are not tracked;
//! the engine is exact up to second order in that sense.

use std::cell::{Cell, Ref, RefCell};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tensor::{gemm, Operand, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    /// Pass-through that drops the parent's tangent.
    Identity(usize),
    Stop(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    RowSum(usize),
    Sum(usize),
    Square(usize),
    Exp(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Gelu(usize),
    GeluDeriv(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Identity(_) => "identity",
            Op::Stop(_) => "stopgrad",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::RowSum(_) => "row_sum",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Gelu(_) => "gelu",
            Op::GeluDeriv(_) => "gelu_deriv",
            Op::Concat(_) => "concat",
            Op::SliceCols(..) => "slice_cols",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::Identity(a)
            | Op::Stop(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Gelu(a)
            | Op::GeluDeriv(a)
            | Op::SliceCols(a, _) => vec![*a],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tangent: Option<usize>,
    needs_grad: bool,
}

/// Records one loss evaluation. Create a fresh tape per evaluation and drop
/// it after the reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<&'static str>>,
    building_tangent: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
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

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.var(self.push(value, Op::Leaf))
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.var(self.push(value, Op::Const))
    }

    /// Returns a copy of `x` whose tangent is `dir`, replacing any tangent
    /// `x` already had. Gradients flow through to both `x` and `dir`.
    pub fn seed<'t>(&'t self, x: Var<'t>, dir: Var<'t>) -> Var<'t> {
        assert_eq!(
            x.shape(),
            dir.shape(),
            "tangent direction must match value shape"
        );
        let value = x.value();
        let idx = self.push(value, Op::Identity(x.idx));
        self.nodes.borrow_mut()[idx].tangent = Some(dir.idx);
        self.var(idx)
    }

    /// Concatenates along columns.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            Tensor::hcat(&refs)
        };
        self.op(value, Op::Concat(parts.iter().map(|p| p.idx).collect()))
    }

    /// The first non-finite operation recorded so far, if any.
    pub fn check(&self) -> Result<()> {
        match *self.fault.borrow() {
            Some(op) => Err(Error::non_finite(op)),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn gradients(&self, output: Var<'_>) -> Result<Gradients> {
        self.check()?;
        let nodes = self.nodes.borrow();
        let out = &nodes[output.idx];
        if out.value.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "gradient of a {:?} output; expected a scalar",
                out.value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(output.idx + 1);
        adj.resize_with(output.idx + 1, || None);
        if out.needs_grad {
            adj[output.idx] = Some(Tensor::scalar(1.0));
        }

        for i in (0..=output.idx).rev() {
            let node = &nodes[i];
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match adj[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            backward_step(&nodes, i, g, &mut adj);
        }
        Ok(Gradients { adj })
    }

    fn var(&self, idx: usize) -> Var<'_> {
        Var { tape: self, idx }
    }

    fn push(&self, value: Tensor, op: Op) -> usize {
        if self.fault.borrow().is_none() && !value.is_finite() {
            *self.fault.borrow_mut() = Some(op.name());
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const | Op::Stop(_) => false,
            other => other.parents().iter().any(|&p| nodes[p].needs_grad),
        };
        nodes.push(Node {
            value,
            op,
            tangent: None,
            needs_grad,
        });
        nodes.len() - 1
    }

    /// Pushes a node and, unless a tangent expression is being built,
    /// derives its tangent from its parents'.
    fn op(&self, value: Tensor, op: Op) -> Var<'_> {
        let idx = self.push(value, op);
        if !self.building_tangent.get() {
            self.building_tangent.set(true);
            let tangent = self.tangent_rule(idx);
            self.building_tangent.set(false);
            if let Some(t) = tangent {
                self.nodes.borrow_mut()[idx].tangent = Some(t.idx);
            }
        }
        self.var(idx)
    }

    fn tangent_of(&self, idx: usize) -> Option<Var<'_>> {
        self.nodes.borrow()[idx].tangent.map(|t| self.var(t))
    }

    fn zeros_like(&self, idx: usize) -> Var<'_> {
        let (r, c) = self.nodes.borrow()[idx].value.shape();
        self.constant(Tensor::zeros(r, c))
    }

    fn tangent_rule(&self, idx: usize) -> Option<Var<'_>> {
        let op = self.nodes.borrow()[idx].op.clone();
        let parents = op.parents();
        if parents.iter().all(|&p| self.tangent_of(p).is_none()) {
            return None;
        }
        let v = |i: usize| self.var(i);
        let t = |i: usize| self.tangent_of(i);
        let out = self.var(idx);
        match op {
            Op::Leaf | Op::Const | Op::Identity(_) => None,
            Op::Stop(a) => t(a).map(|ta| ta.stopgrad()),
            Op::Add(a, b) => add_opt(t(a), t(b)),
            Op::Sub(a, b) => match (t(a), t(b)) {
                (Some(ta), Some(tb)) => Some(ta - tb),
                (Some(ta), None) => Some(ta),
                (None, Some(tb)) => Some(-tb),
                (None, None) => None,
            },
            Op::Mul(a, b) => add_opt(t(a).map(|ta| ta * v(b)), t(b).map(|tb| v(a) * tb)),
            Op::Div(a, b) => {
                let num = match (t(a), t(b)) {
                    (Some(ta), Some(tb)) => ta - out * tb,
                    (Some(ta), None) => ta,
                    (None, Some(tb)) => -(out * tb),
                    (None, None) => return None,
                };
                Some(num / v(b))
            }
            Op::Scale(a, c) => t(a).map(|ta| ta.scale(c)),
            Op::Offset(a) => t(a),
            Op::MatMul(a, b) => add_opt(
                t(a).map(|ta| ta.matmul(v(b))),
                t(b).map(|tb| v(a).matmul(tb)),
            ),
            Op::AddRow(a, r) => match (t(a), t(r)) {
                (ta, Some(tr)) => Some(ta.unwrap_or_else(|| self.zeros_like(a)).add_row(tr)),
                (ta, None) => ta,
            },
            Op::MulCol(a, c) => add_opt(
                t(a).map(|ta| ta.mul_col(v(c))),
                t(c).map(|tc| v(a).mul_col(tc)),
            ),
            Op::RowSum(a) => t(a).map(|ta| ta.row_sum()),
            Op::Sum(a) => t(a).map(|ta| ta.sum()),
            Op::Square(a) => t(a).map(|ta| (v(a) * ta).scale(2.0)),
            Op::Exp(a) => t(a).map(|ta| out * ta),
            Op::Sqrt(a) => t(a).map(|ta| ta.scale(0.5) / out),
            Op::Sin(a) => t(a).map(|ta| v(a).cos() * ta),
            Op::Cos(a) => t(a).map(|ta| -(v(a).sin() * ta)),
            Op::Gelu(a) => t(a).map(|ta| v(a).gelu_deriv() * ta),
            Op::GeluDeriv(_) => panic!("tangent of a tangent is not supported"),
            Op::Concat(parts) => {
                let ts: Vec<Var<'_>> = parts
                    .iter()
                    .map(|&p| t(p).unwrap_or_else(|| self.zeros_like(p)))
                    .collect();
                Some(self.concat(&ts))
            }
            Op::SliceCols(a, start) => {
                let n = out.shape().1;
                t(a).map(|ta| ta.slice_cols(start, n))
            }
        }
    }
}

fn add_opt<'t>(a: Option<Var<'t>>, b: Option<Var<'t>>) -> Option<Var<'t>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a + b),
        (a, None) => a,
        (None, b) => b,
    }
}

fn accumulate(nodes: &[Node], adj: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut adj[idx] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backward_step(nodes: &[Node], i: usize, g: Tensor, adj: &mut [Option<Tensor>]) {
    let val = |j: usize| &nodes[j].value;
    let out = &nodes[i].value;
    let mut acc = |j: usize, t: Tensor| accumulate(nodes, adj, j, t);
    match nodes[i].op {
        Op::Leaf | Op::Const | Op::Stop(_) => {}
        Op::Identity(a) | Op::Offset(a) => acc(a, g),
        Op::Add(a, b) => {
            acc(a, g.clone());
            acc(b, g);
        }
        Op::Sub(a, b) => {
            acc(a, g.clone());
            acc(b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if nodes[a].needs_grad {
                acc(a, g.zip_map(val(b), |g, b| g * b));
            }
            acc(b, g.zip_map(val(a), |g, a| g * a));
        }
        Op::Div(a, b) => {
            let ga = g.zip_map(val(b), |g, b| g / b);
            if nodes[b].needs_grad {
                // d(a/b)/db = -out/b
                let gb = ga.zip_map(out, |gb, o| -gb * o);
                acc(b, gb);
            }
            acc(a, ga);
        }
        Op::Scale(a, c) => acc(a, g.map(|x| c * x)),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            if nodes[a].needs_grad {
                let mut ga = vec![0.0; ta.len()];
                gemm(Operand::plain(&g), Operand::transposed(tb), &mut ga, 0.0);
                acc(a, Tensor::from_parts(ta.rows(), ta.cols(), ga));
            }
            if nodes[b].needs_grad {
                let mut gb = vec![0.0; tb.len()];
                gemm(Operand::transposed(ta), Operand::plain(&g), &mut gb, 0.0);
                acc(b, Tensor::from_parts(tb.rows(), tb.cols(), gb));
            }
        }
        Op::AddRow(a, r) => {
            if nodes[r].needs_grad {
                let mut colsum = vec![0.0; g.cols()];
                for row in g.iter_rows() {
                    for (s, v) in colsum.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(r, Tensor::row_vector(colsum));
            }
            acc(a, g);
        }
        Op::MulCol(a, c) => {
            let (ta, tc) = (val(a), val(c));
            if nodes[c].needs_grad {
                let gc: Vec<f64> = g
                    .iter_rows()
                    .zip(ta.iter_rows())
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                acc(c, Tensor::column(gc));
            }
            if nodes[a].needs_grad {
                let mut ga = g;
                let cols = ga.cols();
                for (r, row) in ga.data_mut().chunks_exact_mut(cols.max(1)).enumerate() {
                    let k = tc.data()[r];
                    row.iter_mut().for_each(|x| *x *= k);
                }
                acc(a, ga);
            }
        }
        Op::RowSum(a) => {
            let cols = val(a).cols();
            let mut ga = Vec::with_capacity(val(a).len());
            for &x in g.data() {
                ga.extend(std::iter::repeat_n(x, cols));
            }
            acc(a, Tensor::from_parts(g.rows(), cols, ga));
        }
        Op::Sum(a) => {
            let (r, c) = val(a).shape();
            acc(a, Tensor::full(r, c, g.item()));
        }
        Op::Square(a) => acc(a, g.zip_map(val(a), |g, x| 2.0 * x * g)),
        Op::Exp(a) => acc(a, g.zip_map(out, |g, o| g * o)),
        Op::Sqrt(a) => acc(a, g.zip_map(out, |g, o| 0.5 * g / o)),
        Op::Sin(a) => acc(a, g.zip_map(val(a), |g, x| g * x.cos())),
        Op::Cos(a) => acc(a, g.zip_map(val(a), |g, x| -g * x.sin())),
        Op::Gelu(a) => acc(a, g.zip_map(val(a), |g, x| g * gelu_deriv(x))),
        Op::GeluDeriv(a) => acc(a, g.zip_map(val(a), |g, x| g * gelu_curvature(x))),
        Op::Concat(ref parts) => {
            let mut start = 0;
            for &p in parts {
                let w = val(p).cols();
                if nodes[p].needs_grad {
                    acc(p, g.slice_cols(start, w));
                }
                start += w;
            }
        }
        Op::SliceCols(a, start) => {
            let (rows, cols) = val(a).shape();
            let w = g.cols();
            let mut ga = Tensor::zeros(rows, cols);
            for r in 0..rows {
                ga.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
            }
            acc(a, ga);
        }
    }
}

/// Adjoints from one reverse sweep.
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` when the output does not
    /// depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.adj.get(var.idx).and_then(Option::as_ref)
    }

    /// Gradient with respect to a leaf, zero-filled when absent.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.shape()
    }

    /// Borrow of the node's value. Do not hold it across tape operations.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.idx].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    /// Directional derivative carried by this node, if any direction reaches it.
    pub fn tangent(&self) -> Option<Var<'t>> {
        self.tape.tangent_of(self.idx)
    }

    /// Tangent value, zero-filled when no seeded direction reaches this node.
    pub fn tangent_value(&self) -> Tensor {
        match self.tangent() {
            Some(t) => t.value(),
            None => {
                let (r, c) = self.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Same value and tangent; no gradient flows back through this node.
    pub fn stopgrad(self) -> Var<'t> {
        let v = self.value();
        self.tape.op(v, Op::Stop(self.idx))
    }

    /// Same value, gradient passes, tangent dropped.
    pub fn primal(self) -> Var<'t> {
        let v = self.value();
        self.tape.op(v, Op::Identity(self.idx))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx].value.matmul(&nodes[rhs.idx].value)
        };
        self.tape.op(v, Op::MatMul(self.idx, rhs.idx))
    }

    /// Adds a `1 x m` row to every row of an `n x m` tensor.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (a, r) = (&nodes[self.idx].value, &nodes[row.idx].value);
            assert_eq!((1, a.cols()), r.shape(), "add_row shape mismatch");
            let mut out = a.clone();
            let cols = out.cols();
            for chunk in out.data_mut().chunks_exact_mut(cols.max(1)) {
                chunk.iter_mut().zip(r.data()).for_each(|(x, b)| *x += b);
            }
            out
        };
        self.tape.op(v, Op::AddRow(self.idx, row.idx))
    }

    /// Scales row `i` of an `n x m` tensor by entry `i` of an `n x 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (a, c) = (&nodes[self.idx].value, &nodes[col.idx].value);
            assert_eq!((a.rows(), 1), c.shape(), "mul_col shape mismatch");
            let mut out = a.clone();
            let cols = out.cols();
            for (chunk, k) in out.data_mut().chunks_exact_mut(cols.max(1)).zip(c.data()) {
                chunk.iter_mut().for_each(|x| *x *= k);
            }
            out
        };
        self.tape.op(v, Op::MulCol(self.idx, col.idx))
    }

    /// Sums each row into an `n x 1` column.
    pub fn row_sum(self) -> Var<'t> {
        let v = {
            let a = self.value_ref();
            Tensor::column(a.iter_rows().map(|r| r.iter().sum()).collect())
        };
        self.tape.op(v, Op::RowSum(self.idx))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value_ref().sum());
        self.tape.op(v, Op::Sum(self.idx))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value_ref().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value_ref().map(|x| c * x);
        self.tape.op(v, Op::Scale(self.idx, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value_ref().map(|x| x + c);
        self.tape.op(v, Op::Offset(self.idx))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, Op::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(f64::cos, Op::Cos)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, Op::Gelu)
    }

    pub(crate) fn gelu_deriv(self) -> Var<'t> {
        self.unary(gelu_deriv, Op::GeluDeriv)
    }

    pub fn slice_cols(self, start: usize, n: usize) -> Var<'t> {
        let v = self.value_ref().slice_cols(start, n);
        self.tape.op(v, Op::SliceCols(self.idx, start))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var<'t> {
        let v = self.value_ref().map(f);
        self.tape.op(v, op(self.idx))
    }

    fn binary(
        self,
        rhs: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx].value.zip_map(&nodes[rhs.idx].value, f)
        };
        self.tape.op(v, op(self.idx, rhs.idx))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| a + b, Op::Add)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| a - b, Op::Sub)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| a * b, Op::Mul)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| a / b, Op::Div)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub(crate) fn gelu_deriv(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

fn gelu_curvature(x: f64) -> f64 {
    std_normal_pdf(x) * (2.0 - x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, x0: f64) -> (f64, f64) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(x0));
        let y = f(x);
        let g = tape.gradients(y).unwrap();
        (y.value().item(), g.wrt(x).item())
    }

    #[test]
    fn square_gradient() {
        let (y, g) = scalar_grad(|x| x.square(), 3.0);
        assert_eq!((y, g), (9.0, 6.0));
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let g = tape.gradients(c).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.wrt(x).item(), 0.0);
    }

    #[test]
    fn elementwise_derivatives_match_closed_forms() {
        let x0: f64 = 0.7;
        type Case = (&'static str, fn(Var<'_>) -> Var<'_>, f64);
        let cases: Vec<Case> = vec![
            ("exp", |x| x.exp(), x0.exp()),
            ("sqrt", |x| x.sqrt(), 0.5 / x0.sqrt()),
            ("sin", |x| x.sin(), x0.cos()),
            ("cos", |x| x.cos(), -x0.sin()),
            ("gelu", |x| x.gelu(), gelu_deriv(x0)),
        ];
        for (name, f, expected) in cases {
            let (_, g) = scalar_grad(f, x0);
            assert!((g - expected).abs() < 1e-14, "{name}: {g} vs {expected}");
        }
    }

    #[test]
    fn gelu_derivatives_are_consistent() {
        let h = 1e-5;
        for &x in &[-3.0, -1.0, -0.2, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_deriv(x)).abs() < 1e-9);
            let fd2 = (gelu_deriv(x + h) - gelu_deriv(x - h)) / (2.0 * h);
            assert!((fd2 - gelu_curvature(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn stopgrad_blocks_gradient_but_not_value() {
        // d/dθ [θ · sg(θ)] = sg(θ) = 2
        let (y, g) = scalar_grad(|x| x * x.stopgrad(), 2.0);
        assert_eq!((y, g), (4.0, 2.0));
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.stopgrad();
        assert_eq!(y.value().item().to_bits(), 2.0f64.to_bits());
        assert!(tape.gradients(y).unwrap().get(x).is_none());
    }

    #[test]
    fn stopgrad_passes_tangent() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let dir = tape.constant(Tensor::scalar(1.0));
        let xs = tape.seed(x, dir);
        let y = xs.square().stopgrad();
        assert_eq!(y.tangent_value().item(), 6.0);
    }

    #[test]
    fn jvp_of_square() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let dir = tape.constant(Tensor::scalar(1.0));
        let y = tape.seed(x, dir).square();
        assert_eq!(y.value().item(), 9.0);
        assert_eq!(y.tangent_value().item(), 6.0);
    }

    #[test]
    fn gradient_through_tangent() {
        // f(θ, t) = θ t², L = ∂_t f at t = 3  ⇒  dL/dθ = 2t = 6
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(0.5));
        let t = tape.constant(Tensor::scalar(3.0));
        let t = tape.seed(t, tape.constant(Tensor::scalar(1.0)));
        let f = theta * t.square();
        let l = f.tangent().unwrap();
        let g = tape.gradients(l).unwrap();
        assert_eq!(g.wrt(theta).item(), 6.0);
    }

    #[test]
    fn tangent_independent_of_direction_gives_zero_gradient() {
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(0.5));
        let t = tape.seed(
            tape.constant(Tensor::scalar(3.0)),
            tape.constant(Tensor::scalar(1.0)),
        );
        let f = theta.square() + t.scale(0.0);
        let l = f.tangent().unwrap();
        let g = tape.gradients(l).unwrap();
        assert_eq!(g.wrt(theta).item(), 0.0);
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let y = x.sqrt();
        match tape.gradients(y) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "sqrt"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_scalar_output_is_a_shape_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(tape.gradients(x), Err(Error::Shape(_))));
    }
}
