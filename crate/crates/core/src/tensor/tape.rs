use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{broadcast_period, Tensor};
use crate::error::{Error, Result};

/// A single-use record of differentiable computation.
///
/// Ops evaluate immediately and append a node. A node requires a gradient
/// when any of its inputs does; constant subgraphs are recorded but skipped
/// during [`Tape::backward`]. A tape can be differentiated once.
pub struct Tape {
    inner: RefCell<Inner>,
}

struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    Elu,
    Scale(f64),
    Shift(f64),
    ClampMin(f64),
}

enum Op {
    Leaf,
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp, usize),
    Matmul(usize, usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize, end: usize },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// A leaf that receives a gradient.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn leaf_shared(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_rc(value, Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Concatenates `[rows, c_i]` operands along the last axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value_of(p.id)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_cols(&refs)?;
        let rg = parts.iter().any(|p| self.requires(p.id));
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Reverse pass from a one-element `root`.
    ///
    /// Returns gradients for every leaf reachable from the root that was
    /// created with `requires_grad`. The tape cannot be differentiated again.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Tape("root belongs to a different tape".into()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Tape("backward called twice on the same tape".into()));
        }
        let numel = inner.nodes[root.id].value.numel();
        if numel != 1 {
            return Err(Error::Tape(format!(
                "backward root must be a scalar, got shape {:?}",
                inner.nodes[root.id].value.shape()
            )));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        let mut out = Gradients::default();
        if !nodes[root.id].requires_grad {
            return Ok(out);
        }
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        let t = Tensor::new(node.value.shape().to_vec(), g)?;
                        out.by_node.insert(id, t);
                    }
                }
                Op::Binary(kind, a, b) => {
                    binary_backward(*kind, nodes, *a, *b, &g, &mut grads);
                }
                Op::Unary(kind, a) => {
                    if nodes[*a].requires_grad {
                        let x = nodes[*a].value.data();
                        let y = node.value.data();
                        match &mut grads[*a] {
                            Some(ga) => unary_backward(*kind, x, y, &g, ga),
                            slot @ None => {
                                let mut ga = g;
                                unary_backward_in_place(*kind, x, y, &mut ga);
                                *slot = Some(ga);
                            }
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if nodes[*a].requires_grad {
                        let ga = grad_slot(&mut grads, *a, m * k);
                        // ga += g · bᵀ
                        unsafe {
                            matrixmultiply::dgemm(
                                m,
                                n,
                                k,
                                1.0,
                                g.as_ptr(),
                                n as isize,
                                1,
                                bv.data().as_ptr(),
                                1,
                                n as isize,
                                1.0,
                                ga.as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    }
                    if nodes[*b].requires_grad {
                        let gb = grad_slot(&mut grads, *b, k * n);
                        // gb += aᵀ · g
                        unsafe {
                            matrixmultiply::dgemm(
                                k,
                                m,
                                n,
                                1.0,
                                av.data().as_ptr(),
                                1,
                                k as isize,
                                g.as_ptr(),
                                n as isize,
                                1,
                                1.0,
                                gb.as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let width = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = nodes[p].value.cols();
                        if nodes[p].requires_grad {
                            let gp = grad_slot(&mut grads, p, rows * c);
                            for r in 0..rows {
                                let src = &g[r * width + offset..r * width + offset + c];
                                for (d, s) in gp[r * c..(r + 1) * c].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        offset += c;
                    }
                }
                Op::Slice { src, start, end } => {
                    if nodes[*src].requires_grad {
                        let sv = &nodes[*src].value;
                        let (rows, c) = (sv.rows(), sv.cols());
                        let w = end - start;
                        let gs = grad_slot(&mut grads, *src, rows * c);
                        for r in 0..rows {
                            for j in 0..w {
                                gs[r * c + start + j] += g[r * w + j];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if nodes[*a].requires_grad {
                        let ga = grad_slot(&mut grads, *a, g.len());
                        add_assign(ga, &g);
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    if nodes[*a].requires_grad {
                        let n = nodes[*a].value.numel();
                        let scale = if matches!(node.op, Op::Mean(_)) {
                            g[0] / n as f64
                        } else {
                            g[0]
                        };
                        let ga = grad_slot(&mut grads, *a, n);
                        for v in ga.iter_mut() {
                            *v += scale;
                        }
                    }
                }
                Op::SumLast(a) => {
                    if nodes[*a].requires_grad {
                        let av = &nodes[*a].value;
                        let (rows, c) = (av.rows(), av.cols());
                        let ga = grad_slot(&mut grads, *a, rows * c);
                        for r in 0..rows {
                            for v in &mut ga[r * c..(r + 1) * c] {
                                *v += g[r];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn binary_forward(kind: BinaryOp, x: f64, y: f64) -> f64 {
    match kind {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
        BinaryOp::Minimum => {
            if x <= y {
                x
            } else {
                y
            }
        }
    }
}

/// Visits `(i, ia, ib)` for every output element `i` of a broadcast binary
/// op, where the smaller operand repeats with period equal to its length.
#[inline(always)]
fn for_each_pair(na: usize, nb: usize, mut f: impl FnMut(usize, usize, usize)) {
    if na == nb {
        for i in 0..na {
            f(i, i, i);
        }
    } else if na > nb {
        for base in (0..na).step_by(nb) {
            for j in 0..nb {
                f(base + j, base + j, j);
            }
        }
    } else {
        for base in (0..nb).step_by(na) {
            for j in 0..na {
                f(base + j, j, base + j);
            }
        }
    }
}

fn binary_partials(kind: BinaryOp, x: f64, y: f64) -> (f64, f64) {
    match kind {
        BinaryOp::Add => (1.0, 1.0),
        BinaryOp::Sub => (1.0, -1.0),
        BinaryOp::Mul => (y, x),
        BinaryOp::Div => (1.0 / y, -x / (y * y)),
        BinaryOp::Minimum => {
            if x <= y {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

fn binary_backward(
    kind: BinaryOp,
    nodes: &[Node],
    a: usize,
    b: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let av = nodes[a].value.data();
    let bv = nodes[b].value.data();
    let (na, nb) = (av.len(), bv.len());
    let n = na.max(nb);
    for (target, len, first) in [(a, na, true), (b, nb, false)] {
        if !nodes[target].requires_grad {
            continue;
        }
        let pick = |x: f64, y: f64| {
            let (pa, pb) = binary_partials(kind, x, y);
            if first {
                pa
            } else {
                pb
            }
        };
        if grads[target].is_none() && len == n {
            // first contribution at full size: write instead of accumulate
            let mut v = Vec::with_capacity(n);
            for_each_pair(na, nb, |i, ia, ib| v.push(g[i] * pick(av[ia], bv[ib])));
            grads[target] = Some(v);
        } else {
            let gt = grad_slot(grads, target, len);
            for_each_pair(na, nb, |i, ia, ib| {
                let k = if first { ia } else { ib };
                gt[k] += g[i] * pick(av[ia], bv[ib]);
            });
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: UnaryOp, x: f64) -> f64 {
    match kind {
        UnaryOp::Neg => -x,
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Softplus => softplus(x),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Square => x * x,
        UnaryOp::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        UnaryOp::Scale(c) => c * x,
        UnaryOp::Shift(c) => x + c,
        UnaryOp::ClampMin(c) => x.max(c),
    }
}

fn unary_backward(kind: UnaryOp, x: &[f64], y: &[f64], g: &[f64], ga: &mut [f64]) {
    for i in 0..g.len() {
        ga[i] += g[i] * unary_partial(kind, x, y, i);
    }
}

/// Turns the upstream gradient `g` into the input gradient.
fn unary_backward_in_place(kind: UnaryOp, x: &[f64], y: &[f64], g: &mut [f64]) {
    for i in 0..g.len() {
        g[i] *= unary_partial(kind, x, y, i);
    }
}

#[inline(always)]
fn unary_partial(kind: UnaryOp, x: &[f64], y: &[f64], i: usize) -> f64 {
    {
        match kind {
            UnaryOp::Neg => -1.0,
            UnaryOp::Tanh => 1.0 - y[i] * y[i],
            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
            UnaryOp::Softplus => sigmoid(x[i]),
            UnaryOp::Exp => y[i],
            UnaryOp::Log => 1.0 / x[i],
            UnaryOp::Sqrt => 0.5 / y[i],
            UnaryOp::Square => 2.0 * x[i],
            UnaryOp::Elu => {
                if x[i] > 0.0 {
                    1.0
                } else {
                    y[i] + 1.0
                }
            }
            UnaryOp::Scale(c) => c,
            UnaryOp::Shift(_) => 1.0,
            UnaryOp::ClampMin(c) => {
                if x[i] > c {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// The single value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// A constant copy of this value; gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.leaf_shared(v, false)
    }

    fn binary(self, other: Var<'t>, kind: BinaryOp, name: &'static str) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let shape = if av.numel() >= bv.numel() {
            broadcast_period(name, av.shape(), bv.shape())?;
            av.shape().to_vec()
        } else {
            broadcast_period(name, bv.shape(), av.shape())?;
            bv.shape().to_vec()
        };
        let (ad, bd) = (av.data(), bv.data());
        let (na, nb) = (ad.len(), bd.len());
        let n = na.max(nb);
        let mut data = Vec::with_capacity(n);
        for_each_pair(na, nb, |_, ia, ib| data.push(binary_forward(kind, ad[ia], bd[ib])));
        let rg = self.requires_grad() || other.requires_grad();
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(out, Op::Binary(kind, self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div, "div")
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Minimum, "minimum")
    }

    fn unary(self, kind: UnaryOp) -> Var<'t> {
        let v = self.value();
        let out = v.map(|x| unary_forward(kind, x));
        let rg = self.requires_grad();
        self.tape.push(out, Op::Unary(kind, self.id), rg)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryOp::Neg)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryOp::Sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryOp::Softplus)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(UnaryOp::Log)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryOp::Square)
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(self) -> Var<'t> {
        self.unary(UnaryOp::Elu)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        self.unary(UnaryOp::Shift(c))
    }

    /// `max(x, floor)`; no gradient flows where `x <= floor`.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(UnaryOp::ClampMin(floor))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                av.data().as_ptr(),
                k as isize,
                1,
                bv.data().as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.requires_grad() || other.requires_grad();
        let out = Tensor::new([m, n], c)?;
        Ok(self.tape.push(out, Op::Matmul(self.id, other.id), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, c) = (v.rows(), v.cols());
        if start >= end || end > c {
            return Err(Error::shape(
                "slice",
                format!("columns {start}..{end} of shape {:?}", v.shape()),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * c + start..r * c + end]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let rg = self.requires_grad();
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Slice {
                src: self.id,
                start,
                end,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Reshape(self.id), rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.sum() / v.numel() as f64;
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), rg)
    }

    /// Reduces the last axis: `[.., n] -> [.., 1]`.
    pub fn sum_last(self) -> Var<'t> {
        let v = self.value();
        let (rows, c) = (v.rows(), v.cols());
        let data: Vec<f64> = (0..rows)
            .map(|r| v.data()[r * c..(r + 1) * c].iter().sum())
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.requires_grad();
        let out = Tensor::new(shape, data).expect("sum_last shape");
        self.tape.push(out, Op::SumLast(self.id), rg)
    }
}
