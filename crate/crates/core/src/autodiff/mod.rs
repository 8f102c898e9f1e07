//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Tape`] owns every intermediate value; [`Var`] is a cheap handle into it. Operations
//! return `Result` because shapes are checked at graph-construction time.

mod check;
pub mod fft;
mod kernels;

use std::cell::{Ref, RefCell};

use serde::{Deserialize, Serialize};

pub use check::finite_diff_check;
pub use kernels::ConvMode;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{broadcast_shapes, broadcast_strides, for_each_broadcast2, split_axis, strides_of, Tensor};

/// Storage precision of tape values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Abs,
    Exp,
    Log,
    Sin,
    Cos,
    Sigmoid,
    Square,
    Sqrt,
    Relu,
    Tanh,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    SumAll(usize),
    SumAxis(usize),
    MaxAxis(usize, Vec<usize>),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Slice { x: usize, axis: usize, start: usize },
    Pad { x: usize, axis: usize, before: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Reshape(usize),
    Broadcast(usize),
    Permute(usize, Vec<usize>),
    Conv1d { x: usize, w: usize, off: isize, depthwise: bool },
    Rfft { x: usize, n: usize },
    Irfft { x: usize, n: usize },
    ComplexMul(usize, usize),
    SpectralMix(usize, usize),
    StraightThrough(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Single-threaded; build one per forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when it did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

fn round_f32(mut t: Tensor) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    t
}

/// Sum `g` (shaped `out`) down to the broadcast source shape `src`.
fn reduce_to(g: &Tensor, src: &[usize]) -> Tensor {
    if g.shape() == src {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let strides = broadcast_strides(src, &out);
    let zero = vec![0; out.len()];
    let mut r = vec![0.0; src.iter().product()];
    let gd = g.data();
    for_each_broadcast2(&out, &strides, &zero, |flat, os, _| r[os] += gd[flat]);
    Tensor::from_parts(src.to_vec(), r)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Config(format!("axis {axis} out of range for rank {}", shape.len())));
    }
    Ok(())
}

/// Batch layout of a matmul operand: (batch count, rows, cols).
fn mm_dims(s: &[usize]) -> Result<(usize, usize, usize)> {
    match s.len() {
        2 => Ok((1, s[0], s[1])),
        3 => Ok((s[0], s[1], s[2])),
        r => Err(dim_err!("matmul expects rank 2 or 3, got rank {r}")),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: RefCell::new(Vec::new()), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let value = match self.precision {
            Precision::F64 => value,
            Precision::F32 => round_f32(value),
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable leaf.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn values(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let n = self.values();
        ids.iter().any(|&i| n[i].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.values();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_parts(nodes[loss.id].value.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let out = y.shape();
            let sa = broadcast_strides(va.shape(), out);
            let sb = broadcast_strides(vb.shape(), out);
            let (ad, bd, gd) = (va.data(), vb.data(), g.data());
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for_each_broadcast2(out, &sa, &sb, |f, ia, ib| {
                let (x1, x2, gv) = (ad[ia], bd[ib], gd[f]);
                let (da, db) = match kind {
                    Binary::Add => (gv, gv),
                    Binary::Sub => (gv, -gv),
                    Binary::Mul => (gv * x2, gv * x1),
                    Binary::Div => (gv / x2, -gv * x1 / (x2 * x2)),
                    Binary::Maximum => {
                        if x1 >= x2 {
                            (gv, 0.0)
                        } else {
                            (0.0, gv)
                        }
                    }
                };
                ga[ia] += da;
                gb[ib] += db;
            });
            accumulate(nodes, grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
            accumulate(nodes, grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
        }
        Op::Unary(kind, x) => {
            let xv = val(*x);
            let d: Vec<f64> = xv
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&x, &y), &g)| {
                    g * match kind {
                        Unary::Abs => {
                            if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Exp => y,
                        Unary::Log => 1.0 / x,
                        Unary::Sin => x.cos(),
                        Unary::Cos => -x.sin(),
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Square => 2.0 * x,
                        Unary::Sqrt => 0.5 / y,
                        Unary::Relu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - y * y,
                        Unary::Gelu => kernels::gelu_grad(x),
                    }
                })
                .collect();
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
        }
        Op::Scale(x, a) => accumulate(nodes, grads, *x, g.scale(*a)),
        Op::AddScalar(x) | Op::StraightThrough(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (ba, m, k) = mm_dims(va.shape()).expect("validated at forward");
            let (bb, _, n) = mm_dims(vb.shape()).expect("validated at forward");
            let batch = ba.max(bb);
            let mut ga = vec![0.0; va.numel()];
            let mut gb = vec![0.0; vb.numel()];
            for i in 0..batch {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let ao = if ba == 1 { 0 } else { i * m * k };
                let bo = if bb == 1 { 0 } else { i * k * n };
                kernels::mm_nt(&mut ga[ao..ao + m * k], gi, &vb.data()[bo..bo + k * n], m, k, n);
                kernels::mm_tn(&mut gb[bo..bo + k * n], &va.data()[ao..ao + m * k], gi, m, k, n);
            }
            accumulate(nodes, grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
            accumulate(nodes, grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
        }
        Op::SumAll(x) => {
            let s = val(*x).shape().to_vec();
            accumulate(nodes, grads, *x, Tensor::full(&s, g.item()));
        }
        Op::SumAxis(x) | Op::Broadcast(x) => {
            let s = val(*x).shape().to_vec();
            // SumAxis keeps the reduced axis, so its gradient is a broadcast back.
            let out = if matches!(node.op, Op::SumAxis(..)) { broadcast_to(g, &s) } else { reduce_to(g, &s) };
            accumulate(nodes, grads, *x, out);
        }
        Op::MaxAxis(x, arg) => {
            let xv = val(*x);
            let mut d = vec![0.0; xv.numel()];
            for (gv, &i) in g.data().iter().zip(arg) {
                d[i] += gv;
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
        }
        Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
            let log = matches!(node.op, Op::LogSoftmax(..));
            let (outer, ext, inner) = split_axis(y.shape(), *axis);
            let mut d = vec![0.0; y.numel()];
            let (yd, gd) = (y.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * ext + j) * inner + i;
                    if log {
                        let gs: f64 = (0..ext).map(|j| gd[at(j)]).sum();
                        for j in 0..ext {
                            d[at(j)] = gd[at(j)] - yd[at(j)].exp() * gs;
                        }
                    } else {
                        let dot: f64 = (0..ext).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..ext {
                            d[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(y.shape().to_vec(), d));
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape().to_vec();
            let (outer, ext, inner) = split_axis(&xs, *axis);
            let len = y.shape()[*axis];
            let mut d = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * ext + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(src);
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(xs, d));
        }
        Op::Pad { x, axis, before } => {
            let xs = val(*x).shape().to_vec();
            let d = slice_data(g, *axis, *before, xs[*axis]);
            accumulate(nodes, grads, *x, d);
        }
        Op::Concat { xs, axis } => {
            let mut start = 0;
            for &p in xs {
                let len = val(p).shape()[*axis];
                accumulate(nodes, grads, p, slice_data(g, *axis, start, len));
                start += len;
            }
        }
        Op::Reshape(x) => {
            let s = val(*x).shape().to_vec();
            accumulate(nodes, grads, *x, Tensor::from_parts(s, g.data().to_vec()));
        }
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(nodes, grads, *x, permute_data(g, &inv));
        }
        Op::Conv1d { x, w, off, depthwise } => {
            let (xv, wv) = (val(*x), val(*w));
            let s = xv.shape();
            let (o, k) = if *depthwise { (wv.shape()[0], wv.shape()[1]) } else { (wv.shape()[0], wv.shape()[2]) };
            let (dx, dw) =
                kernels::conv1d_backward(g.data(), xv.data(), (s[0], s[1], s[2]), wv.data(), o, k, *off, *depthwise);
            accumulate(nodes, grads, *x, Tensor::from_parts(s.to_vec(), dx));
            accumulate(nodes, grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
        }
        Op::Rfft { x, n } => {
            let xv = val(*x);
            let len = *xv.shape().last().unwrap();
            let rows = xv.numel() / len;
            let d = fft::rfft_rows_adjoint(g.data(), rows, len, *n);
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
        }
        Op::Irfft { x, n } => {
            let xv = val(*x);
            let rows = y.numel() / n;
            let d = fft::irfft_rows_adjoint(g.data(), rows, *n);
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
        }
        Op::ComplexMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let out = &y.shape()[..y.rank() - 1];
            let sa = broadcast_strides(&va.shape()[..va.rank() - 1], out);
            let sb = broadcast_strides(&vb.shape()[..vb.rank() - 1], out);
            let (ad, bd, gd) = (va.data(), vb.data(), g.data());
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for_each_broadcast2(out, &sa, &sb, |f, ia, ib| {
                let (gr, gi) = (gd[2 * f], gd[2 * f + 1]);
                let (ar, ai) = (ad[2 * ia], ad[2 * ia + 1]);
                let (br, bi) = (bd[2 * ib], bd[2 * ib + 1]);
                // g·conj(b) and g·conj(a)
                ga[2 * ia] += gr * br + gi * bi;
                ga[2 * ia + 1] += gi * br - gr * bi;
                gb[2 * ib] += gr * ar + gi * ai;
                gb[2 * ib + 1] += gi * ar - gr * ai;
            });
            accumulate(nodes, grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
            accumulate(nodes, grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
        }
        Op::SpectralMix(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let (b, c, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let o = wv.shape()[0];
            let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
            let mut gx = vec![0.0; xd.len()];
            let mut gw = vec![0.0; wd.len()];
            for bi in 0..b {
                for oi in 0..o {
                    for ci in 0..c {
                        for fi in 0..f {
                            let gi = ((bi * o + oi) * f + fi) * 2;
                            let xi = ((bi * c + ci) * f + fi) * 2;
                            let wi = ((oi * c + ci) * f + fi) * 2;
                            let (gr, gim) = (gd[gi], gd[gi + 1]);
                            gx[xi] += gr * wd[wi] + gim * wd[wi + 1];
                            gx[xi + 1] += gim * wd[wi] - gr * wd[wi + 1];
                            gw[wi] += gr * xd[xi] + gim * xd[xi + 1];
                            gw[wi + 1] += gim * xd[xi] - gr * xd[xi + 1];
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            accumulate(nodes, grads, *w, Tensor::from_parts(wv.shape().to_vec(), gw));
        }
    }
}

fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    let sa = broadcast_strides(t.shape(), shape);
    let zero = vec![0; shape.len()];
    let mut out = vec![0.0; shape.iter().product()];
    let d = t.data();
    for_each_broadcast2(shape, &sa, &zero, |f, ia, _| out[f] = d[ia]);
    Tensor::from_parts(shape.to_vec(), out)
}

fn slice_data(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, ext, inner) = split_axis(t.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * ext + start) * inner;
        out.extend_from_slice(&t.data()[s..s + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let src = t.shape();
    let shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let st = strides_of(src);
    let pst: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let zero = vec![0; shape.len()];
    let mut out = vec![0.0; t.numel()];
    let d = t.data();
    for_each_broadcast2(&shape, &pst, &zero, |f, i, _| out[f] = d[i]);
    Tensor::from_parts(shape, out)
}

// Arithmetic returns `Result` for shape checks, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.values()[self.id].value.shape().to_vec()
    }

    /// A copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.values()[self.id].value.clone()
    }

    /// Borrow the value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.values()[self.id].value)
    }

    /// First element of the value; the usual accessor for scalar results.
    pub fn item(&self) -> f64 {
        self.tape.values()[self.id].value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.values()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let n = self.tape.values();
            let (a, b) = (&n[self.id].value, &n[other.id].value);
            let out = broadcast_shapes(a.shape(), b.shape())?;
            let sa = broadcast_strides(a.shape(), &out);
            let sb = broadcast_strides(b.shape(), &out);
            let (ad, bd) = (a.data(), b.data());
            let mut v = vec![0.0; out.iter().product()];
            for_each_broadcast2(&out, &sa, &sb, |f, ia, ib| {
                let (x, y) = (ad[ia], bd[ib]);
                v[f] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                    Binary::Maximum => {
                        if x >= y {
                            x
                        } else {
                            y
                        }
                    }
                };
            });
            Tensor::from_parts(out, v)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::Binary(kind, self.id, other.id), rg))
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, Binary::Add)
    }
    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, Binary::Sub)
    }
    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, Binary::Mul)
    }
    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, Binary::Div)
    }
    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, Binary::Maximum)
    }
    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, o: Var<'t>) -> Result<Var<'t>> {
        Ok(self.neg().maximum(o.neg())?.neg())
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let value = {
            let n = self.tape.values();
            n[self.id].value.map(|x| match kind {
                Unary::Abs => x.abs(),
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Sin => x.sin(),
                Unary::Cos => x.cos(),
                Unary::Sigmoid => kernels::sigmoid(x),
                Unary::Square => x * x,
                Unary::Sqrt => x.sqrt(),
                Unary::Relu => x.max(0.0),
                Unary::Tanh => x.tanh(),
                Unary::Gelu => kernels::gelu(x),
            })
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::Unary(kind, self.id), rg)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }
    pub fn sin(self) -> Var<'t> {
        self.unary(Unary::Sin)
    }
    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }
    /// `x · sigmoid(x)`.
    pub fn swish(self) -> Result<Var<'t>> {
        self.mul(self.sigmoid())
    }

    pub fn scale(self, a: f64) -> Var<'t> {
        let value = self.with_value(|t| t.scale(a));
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::Scale(self.id, a), rg)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, a: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| v + a));
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::AddScalar(self.id), rg)
    }

    /// Forward `min(x, cap)` with an identity backward.
    pub fn clip_max_straight_through(self, cap: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| v.min(cap)));
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::StraightThrough(self.id), rg)
    }

    /// Matrix product over the last two axes; rank-2 operands broadcast across a rank-3 batch.
    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let value = {
            let n = self.tape.values();
            let (a, b) = (&n[self.id].value, &n[o.id].value);
            let (ba, m, k) = mm_dims(a.shape())?;
            let (bb, k2, nn) = mm_dims(b.shape())?;
            if k != k2 || (ba != bb && ba != 1 && bb != 1) {
                return Err(dim_err!("matmul {:?} × {:?}", a.shape(), b.shape()));
            }
            let batch = ba.max(bb);
            let mut out = vec![0.0; batch * m * nn];
            for i in 0..batch {
                let ao = if ba == 1 { 0 } else { i * m * k };
                let bo = if bb == 1 { 0 } else { i * k * nn };
                kernels::mm_nn(
                    &mut out[i * m * nn..(i + 1) * m * nn],
                    &a.data()[ao..ao + m * k],
                    &b.data()[bo..bo + k * nn],
                    m,
                    k,
                    nn,
                );
            }
            let shape = if a.rank() == 2 && b.rank() == 2 { vec![m, nn] } else { vec![batch, m, nn] };
            Tensor::from_parts(shape, out)
        };
        let rg = self.tape.rg(&[self.id, o.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, o.id), rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.with_value(|t| t.sum()));
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::SumAll(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(|t| t.numel());
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let n = self.tape.values();
            let t = &n[self.id].value;
            check_axis(t.shape(), axis)?;
            let (outer, ext, inner) = split_axis(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..ext {
                    let row = &t.data()[(o * ext + j) * inner..(o * ext + j + 1) * inner];
                    for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = 1;
            Tensor::from_parts(shape, out)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::SumAxis(self.id), rg))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let ext = self.with_value(|t| t.shape().get(axis).copied()).unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / ext as f64))
    }

    /// Maximum over `axis` (kept with extent 1). Ties resolve to the first index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        let (value, arg) = {
            let n = self.tape.values();
            let t = &n[self.id].value;
            check_axis(t.shape(), axis)?;
            let (outer, ext, inner) = split_axis(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = o * ext * inner + i;
                    for j in 1..ext {
                        let at = (o * ext + j) * inner + i;
                        if t.data()[at] > t.data()[best] {
                            best = at;
                        }
                    }
                    out[o * inner + i] = t.data()[best];
                    arg[o * inner + i] = best;
                }
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = 1;
            (Tensor::from_parts(shape, out), arg)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::MaxAxis(self.id, arg), rg))
    }

    /// Minimum over `axis`; ties resolve to the first index.
    pub fn min_axis(self, axis: usize) -> Result<Var<'t>> {
        Ok(self.neg().max_axis(axis)?.neg())
    }

    /// Maximum of all elements, shape `[1]`.
    pub fn max_all(self) -> Result<Var<'t>> {
        let n = self.with_value(|t| t.numel());
        self.reshape(&[n])?.max_axis(0)
    }

    fn softmax_like(self, axis: usize, log: bool) -> Result<Var<'t>> {
        let value = {
            let n = self.tape.values();
            let t = &n[self.id].value;
            check_axis(t.shape(), axis)?;
            let (outer, ext, inner) = split_axis(t.shape(), axis);
            let d = t.data();
            let mut out = vec![0.0; t.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * ext + j) * inner + i;
                    let m = (0..ext).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..ext).map(|j| (d[at(j)] - m).exp()).sum();
                    for j in 0..ext {
                        out[at(j)] = if log { d[at(j)] - m - z.ln() } else { (d[at(j)] - m).exp() / z };
                    }
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        };
        let rg = self.tape.rg(&[self.id]);
        let op = if log { Op::LogSoftmax(self.id, axis) } else { Op::Softmax(self.id, axis) };
        Ok(self.tape.push(value, op, rg))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_like(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_like(axis, true)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let n = self.tape.values();
            let t = &n[self.id].value;
            check_axis(t.shape(), axis)?;
            if len == 0 || start + len > t.shape()[axis] {
                return Err(Error::Config(format!(
                    "slice [{start}, {}) outside axis {axis} of extent {}",
                    start + len,
                    t.shape()[axis]
                )));
            }
            slice_data(t, axis, start, len)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::Slice { x: self.id, axis, start }, rg))
    }

    /// Zero padding along `axis`.
    pub fn pad(self, axis: usize, before: usize, after: usize) -> Result<Var<'t>> {
        let value = {
            let n = self.tape.values();
            let t = &n[self.id].value;
            check_axis(t.shape(), axis)?;
            let (outer, ext, inner) = split_axis(t.shape(), axis);
            let new_ext = ext + before + after;
            let mut out = vec![0.0; outer * new_ext * inner];
            for o in 0..outer {
                let src = &t.data()[o * ext * inner..(o + 1) * ext * inner];
                let dst = (o * new_ext + before) * inner;
                out[dst..dst + ext * inner].copy_from_slice(src);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = new_ext;
            Tensor::from_parts(shape, out)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::Pad { x: self.id, axis, before }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let n = self.tape.values();
            let t = &n[self.id].value;
            if broadcast_shapes(t.shape(), shape)? != shape {
                return Err(dim_err!("cannot broadcast {:?} to {:?}", t.shape(), shape));
            }
            broadcast_to(t, shape)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::Broadcast(self.id), rg))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let value = {
            let n = self.tape.values();
            let t = &n[self.id].value;
            let mut seen = vec![false; t.rank()];
            if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::Config(format!("invalid permutation {perm:?} for rank {}", t.rank())));
            }
            permute_data(t, perm)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::Permute(self.id, perm.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn t(self) -> Result<Var<'t>> {
        let r = self.with_value(|t| t.rank());
        if r < 2 {
            return Err(dim_err!("transpose needs rank ≥ 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Direct 1-D convolution. `self`: [B, C, T]; `w`: [O, C, K], or [C, K] when `depthwise`.
    pub fn conv1d(self, w: Var<'t>, mode: ConvMode, depthwise: bool) -> Result<Var<'t>> {
        let k = *w.shape().last().ok_or_else(|| dim_err!("empty kernel shape"))?;
        self.conv1d_shifted(w, mode.offset(k) as isize, depthwise)
    }

    /// Direct convolution `out[t] = Σ_j x[t + shift − j] · w[j]` with zero padding.
    pub fn conv1d_shifted(self, w: Var<'t>, shift: isize, depthwise: bool) -> Result<Var<'t>> {
        self.same_tape(&w)?;
        let value = {
            let n = self.tape.values();
            let (x, wt) = (&n[self.id].value, &n[w.id].value);
            let s = x.shape();
            if s.len() != 3 {
                return Err(dim_err!("conv1d input must be [B, C, T], got {:?}", s));
            }
            let (o, k) = match (depthwise, wt.shape()) {
                (true, &[c, k]) if c == s[1] => (c, k),
                (false, &[o, c, k]) if c == s[1] => (o, k),
                _ => return Err(dim_err!("conv1d kernel {:?} incompatible with input {:?}", wt.shape(), s)),
            };
            let v = kernels::conv1d(x.data(), (s[0], s[1], s[2]), wt.data(), o, k, shift, depthwise);
            Tensor::from_parts(vec![s[0], o, s[2]], v)
        };
        let rg = self.tape.rg(&[self.id, w.id]);
        Ok(self.tape.push(value, Op::Conv1d { x: self.id, w: w.id, off: shift, depthwise }, rg))
    }

    /// Real FFT of the last axis after zero padding to `n`. Output `[..., n/2+1, 2]`.
    pub fn rfft(self, n: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.values();
            let t = &nodes[self.id].value;
            let len = *t.shape().last().unwrap();
            if len > n {
                return Err(Error::Config(format!("rfft length {n} shorter than input {len}")));
            }
            let rows = t.numel() / len;
            let mut shape = t.shape()[..t.rank() - 1].to_vec();
            shape.extend([fft::rfft_bins(n), 2]);
            Tensor::from_parts(shape, fft::rfft_rows(t.data(), rows, len, n))
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::Rfft { x: self.id, n }, rg))
    }

    /// Inverse of [`Var::rfft`]: `[..., n/2+1, 2]` to `[..., n]`.
    pub fn irfft(self, n: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.values();
            let t = &nodes[self.id].value;
            let s = t.shape();
            if s.len() < 2 || s[s.len() - 1] != 2 || s[s.len() - 2] != fft::rfft_bins(n) {
                return Err(dim_err!("irfft({n}) expects [..., {}, 2], got {:?}", fft::rfft_bins(n), s));
            }
            let rows = t.numel() / (2 * fft::rfft_bins(n));
            let mut shape = s[..s.len() - 2].to_vec();
            shape.push(n);
            Tensor::from_parts(shape, fft::irfft_rows(t.data(), rows, n))
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::Irfft { x: self.id, n }, rg))
    }

    /// Elementwise complex product of `[..., 2]` tensors with broadcasting over leading axes.
    pub fn complex_mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let value = {
            let n = self.tape.values();
            let (a, b) = (&n[self.id].value, &n[o.id].value);
            if a.shape().last() != Some(&2) || b.shape().last() != Some(&2) {
                return Err(dim_err!("complex_mul needs trailing axis 2: {:?}, {:?}", a.shape(), b.shape()));
            }
            let out = broadcast_shapes(&a.shape()[..a.rank() - 1], &b.shape()[..b.rank() - 1])?;
            let sa = broadcast_strides(&a.shape()[..a.rank() - 1], &out);
            let sb = broadcast_strides(&b.shape()[..b.rank() - 1], &out);
            let (ad, bd) = (a.data(), b.data());
            let mut v = vec![0.0; 2 * out.iter().product::<usize>()];
            for_each_broadcast2(&out, &sa, &sb, |f, ia, ib| {
                let (ar, ai, br, bi) = (ad[2 * ia], ad[2 * ia + 1], bd[2 * ib], bd[2 * ib + 1]);
                v[2 * f] = ar * br - ai * bi;
                v[2 * f + 1] = ar * bi + ai * br;
            });
            let mut shape = out;
            shape.push(2);
            Tensor::from_parts(shape, v)
        };
        let rg = self.tape.rg(&[self.id, o.id]);
        Ok(self.tape.push(value, Op::ComplexMul(self.id, o.id), rg))
    }

    /// Channel-mixing complex product: `self` [B, C, F, 2], `w` [O, C, F, 2] to [B, O, F, 2].
    pub fn spectral_mix(self, w: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w)?;
        let value = {
            let n = self.tape.values();
            let (x, wt) = (&n[self.id].value, &n[w.id].value);
            let (xs, ws) = (x.shape(), wt.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[3] != 2 || ws[3] != 2 || xs[1] != ws[1] || xs[2] != ws[2] {
                return Err(dim_err!("spectral_mix {:?} with {:?}", xs, ws));
            }
            let (b, c, f, o) = (xs[0], xs[1], xs[2], ws[0]);
            let (xd, wd) = (x.data(), wt.data());
            let mut v = vec![0.0; b * o * f * 2];
            for bi in 0..b {
                for oi in 0..o {
                    let out = &mut v[(bi * o + oi) * f * 2..(bi * o + oi + 1) * f * 2];
                    for ci in 0..c {
                        let xr = &xd[(bi * c + ci) * f * 2..(bi * c + ci + 1) * f * 2];
                        let wr = &wd[(oi * c + ci) * f * 2..(oi * c + ci + 1) * f * 2];
                        for fi in 0..f {
                            let (ar, ai, br, bim) = (xr[2 * fi], xr[2 * fi + 1], wr[2 * fi], wr[2 * fi + 1]);
                            out[2 * fi] += ar * br - ai * bim;
                            out[2 * fi + 1] += ar * bim + ai * br;
                        }
                    }
                }
            }
            Tensor::from_parts(vec![b, o, f, 2], v)
        };
        let rg = self.tape.rg(&[self.id, w.id]);
        Ok(self.tape.push(value, Op::SpectralMix(self.id, w.id), rg))
    }
}

/// Concatenate along `axis`. All inputs must share the other extents.
pub fn concat<'t>(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = *xs.first().ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
    for x in xs {
        first.same_tape(x)?;
    }
    let tape = first.tape;
    let value = {
        let n = tape.values();
        let s0 = n[first.id].value.shape().to_vec();
        check_axis(&s0, axis)?;
        let mut total = 0;
        for x in xs {
            let s = n[x.id].value.shape();
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(dim_err!("concat shape {:?} vs {:?} on axis {axis}", s, s0));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let t = &n[x.id].value;
                let e = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        Tensor::from_parts(shape, out)
    };
    let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
    let rg = tape.rg(&ids);
    Ok(tape.push(value, Op::Concat { xs: ids, axis }, rg))
}
