//! Tape-based reverse-mode differentiation.
//!
//! Every op on a [`Var`] appends a node to its [`Tape`]. [`Tape::grad`] walks
//! the tape backwards and expresses each vector-Jacobian product with the
//! same `Var` ops, so with `create_graph = true` the returned gradients are
//! themselves nodes on the tape and can be differentiated again
//! (reverse-over-reverse). With `create_graph = false` nothing new is
//! recorded and the gradients are plain constants.
//!
//! The op set is closed under its own adjoints: conv2d pairs with its input-
//! and weight-gradient kernels, pooling with its transpose, gather with
//! scatter, expand with reduce. That closure is what makes second order work.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Powf(usize, f64),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    Expand { v: usize, outer: usize, inner: usize },
    Reduce { x: usize, outer: usize, inner: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    ConvInputGrad { g: usize, w: usize, geom: ConvGeom },
    ConvWeightGrad { x: usize, g: usize, geom: ConvGeom },
    AvgPool { x: usize, k: usize },
    AvgPoolT { g: usize, k: usize },
    Gather { x: usize, src: Arc<[u32]> },
    Scatter { g: usize, src: Arc<[u32]> },
    GroupNorm { x: usize, groups: usize, eps: f64 },
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Sin(a) | Cos(a) | Powf(a, _)
            | Relu(a) | Transpose(a) | Reshape(a) | SumAll(a) => [Some(a), None],
            Expand { v, .. } => [Some(v), None],
            Reduce { x, .. } | GroupNorm { x, .. } => [Some(x), None],
            Conv2d { x, w, .. } => [Some(x), Some(w)],
            ConvInputGrad { g, w, .. } => [Some(g), Some(w)],
            ConvWeightGrad { x, g, .. } => [Some(x), Some(g)],
            AvgPool { x, .. } => [Some(x), None],
            AvgPoolT { g, .. } => [Some(g), None],
            Gather { x, .. } => [Some(x), None],
            Scatter { g, .. } => [Some(g), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of tensor operations.
///
/// A tape is single-threaded. Build one per computation and drop it when the
/// gradients have been read out.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
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
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("dims", &self.dims())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn push_op(&self, value: Tensor, op: Op) -> Var<'_> {
        let track = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().flatten().any(|&i| nodes[i].requires_grad)
        };
        if track {
            self.push_node(value, op, true)
        } else {
            self.push_node(value, Op::Leaf, false)
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.tape) && v.id < self.len()
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`, in order.
    ///
    /// With `create_graph` the backward pass is itself recorded, so the results
    /// can be fed into further ops and differentiated again. Targets that the
    /// loss does not depend on get zero gradients.
    pub fn grad<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>], create_graph: bool) -> Result<Vec<Var<'t>>> {
        if !self.owns(&loss) || wrt.iter().any(|v| !self.owns(v)) {
            return Err(Error::NotOnTape);
        }
        let loss_dims = loss.dims();
        if loss_dims.iter().product::<usize>() != 1 {
            return Err(Error::shape("grad", &loss_dims, &[1]));
        }

        // Only nodes lying on a path from some target to the loss need adjoints.
        let n = loss.id + 1;
        let mut needed = vec![false; n];
        for v in wrt {
            if v.id < n {
                needed[v.id] = true;
            }
        }
        let ops: Vec<Op> = {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !needed[i] && nodes[i].requires_grad {
                    needed[i] = nodes[i].op.inputs().iter().flatten().any(|&j| needed[j]);
                }
            }
            nodes[..n].iter().map(|node| node.op.clone()).collect()
        };

        let prev = self.recording.replace(create_graph);
        let result = self.backward_pass(loss, &ops, &needed);
        self.recording.set(prev);
        let grads = result?;

        Ok(wrt
            .iter()
            .map(|v| match grads.get(v.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&v.dims())),
            })
            .collect())
    }

    fn backward_pass<'t>(&'t self, loss: Var<'t>, ops: &[Op], needed: &[bool]) -> Result<Vec<Option<Var<'t>>>> {
        let mut grads: Vec<Option<Var<'t>>> = vec![None; ops.len()];
        grads[loss.id] = Some(self.constant(Tensor::ones(&loss.dims())));
        let var = |id| Var { tape: self, id };

        for i in (0..ops.len()).rev() {
            let Some(g) = grads[i] else { continue };
            if !needed[i] {
                continue;
            }
            let want = |j: usize| needed[j];
            let mut contribs: [(usize, Option<Var<'t>>); 2] = [(0, None), (0, None)];
            match ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    contribs = [(a, want(a).then_some(g)), (b, want(b).then_some(g))];
                }
                Op::Sub(a, b) => {
                    let gb = if want(b) { Some(g.neg()) } else { None };
                    contribs = [(a, want(a).then_some(g)), (b, gb)];
                }
                Op::Mul(a, b) => {
                    let ga = if want(a) { Some(g.mul(var(b))?) } else { None };
                    let gb = if want(b) { Some(g.mul(var(a))?) } else { None };
                    contribs = [(a, ga), (b, gb)];
                }
                Op::Div(a, b) => {
                    let ga = if want(a) { Some(g.div(var(b))?) } else { None };
                    let gb = if want(b) {
                        // d(a/b)/db = -(a/b)/b
                        Some(g.mul(var(i))?.div(var(b))?.neg())
                    } else {
                        None
                    };
                    contribs = [(a, ga), (b, gb)];
                }
                Op::Neg(a) => contribs[0] = (a, Some(g.neg())),
                Op::Scale(a, c) => contribs[0] = (a, Some(g.scale(c))),
                Op::AddScalar(a) => contribs[0] = (a, Some(g)),
                Op::Exp(a) => contribs[0] = (a, Some(g.mul(var(i))?)),
                Op::Log(a) => contribs[0] = (a, Some(g.div(var(a))?)),
                Op::Sin(a) => contribs[0] = (a, Some(g.mul(var(a).cos())?)),
                Op::Cos(a) => contribs[0] = (a, Some(g.mul(var(a).sin())?.neg())),
                Op::Powf(a, p) => {
                    let d = var(a).powf(p - 1.0).scale(p);
                    contribs[0] = (a, Some(g.mul(d)?));
                }
                Op::Relu(a) => {
                    let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    contribs[0] = (a, Some(g.mul(self.constant(mask))?));
                }
                Op::MatMul(a, b) => {
                    let ga = if want(a) { Some(g.matmul(var(b).t()?)?) } else { None };
                    let gb = if want(b) { Some(var(a).t()?.matmul(g)?) } else { None };
                    contribs = [(a, ga), (b, gb)];
                }
                Op::Transpose(a) => contribs[0] = (a, Some(g.t()?)),
                Op::Reshape(a) => contribs[0] = (a, Some(g.reshape(&var(a).dims())?)),
                Op::SumAll(a) => {
                    let dims = var(a).dims();
                    let numel = dims.iter().product();
                    contribs[0] = (a, Some(g.expand(1, numel, &dims)?));
                }
                Op::Expand { v, outer, inner } => {
                    contribs[0] = (v, Some(g.reduce(outer, inner, &var(v).dims())?));
                }
                Op::Reduce { x, outer, inner } => {
                    contribs[0] = (x, Some(g.expand(outer, inner, &var(x).dims())?));
                }
                Op::Conv2d { x, w, geom } => {
                    let xd = var(x).dims();
                    let wd = var(w).dims();
                    let gx = if want(x) { Some(g.conv2d_input_grad(var(w), (xd[2], xd[3]), geom)?) } else { None };
                    let gw = if want(w) { Some(var(x).conv2d_weight_grad(g, (wd[2], wd[3]), geom)?) } else { None };
                    contribs = [(x, gx), (w, gw)];
                }
                Op::ConvInputGrad { g: gi, w, geom } => {
                    let wd = var(w).dims();
                    let ggi = if want(gi) { Some(g.conv2d(var(w), geom)?) } else { None };
                    let gw = if want(w) { Some(g.conv2d_weight_grad(var(gi), (wd[2], wd[3]), geom)?) } else { None };
                    contribs = [(gi, ggi), (w, gw)];
                }
                Op::ConvWeightGrad { x, g: gi, geom } => {
                    let xd = var(x).dims();
                    let gx = if want(x) { Some(var(gi).conv2d_input_grad(g, (xd[2], xd[3]), geom)?) } else { None };
                    let ggi = if want(gi) { Some(var(x).conv2d(g, geom)?) } else { None };
                    contribs = [(x, gx), (gi, ggi)];
                }
                Op::AvgPool { x, k } => {
                    let xd = var(x).dims();
                    contribs[0] = (x, Some(g.avgpool2d_t(k, (xd[2], xd[3]))?));
                }
                Op::AvgPoolT { g: gi, k } => contribs[0] = (gi, Some(g.avgpool2d(k)?)),
                Op::Gather { x, ref src } => {
                    let xd = var(x).dims();
                    contribs[0] = (x, Some(g.scatter_with(Arc::clone(src), &xd)?));
                }
                Op::Scatter { g: gi, ref src } => {
                    let gd = var(gi).dims();
                    contribs[0] = (gi, Some(g.gather_with(Arc::clone(src), &gd)?));
                }
                Op::GroupNorm { x, groups, eps } => {
                    let gx = if self.recording.get() {
                        group_norm_vjp(var(x), var(i), g, groups, eps)?
                    } else {
                        let gx = tensor::group_norm_grad(&self.value(x), &self.value(i), &g.value(), groups, eps)?;
                        self.constant(gx)
                    };
                    contribs[0] = (x, Some(gx));
                }
            }
            for (j, c) in contribs {
                if let Some(c) = c {
                    if needed[j] {
                        grads[j] = Some(match grads[j] {
                            None => c,
                            Some(prev) => prev.add(c)?,
                        });
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Differentiable form of the group-norm adjoint,
/// `s * (g - mean(g) - y * mean(g * y))` per group with `s = (var + eps)^-1/2`.
fn group_norm_vjp<'t>(x: Var<'t>, y: Var<'t>, g: Var<'t>, groups: usize, eps: f64) -> Result<Var<'t>> {
    let d = x.dims();
    let rows = d[0] * groups;
    let len = d[1] / groups * d[2] * d[3];
    let inv_len = 1.0 / len as f64;
    let row_mean = |v: Var<'t>| -> Result<Var<'t>> { v.reduce(1, len, &[rows])?.scale(inv_len).expand(1, len, &d) };
    let centered = x.sub(row_mean(x)?)?;
    let var = centered.square()?.reduce(1, len, &[rows])?.scale(inv_len);
    let inv_std = var.add_scalar(eps).powf(-0.5).expand(1, len, &d)?;
    let inner = g.sub(row_mean(g)?)?.sub(y.mul(row_mean(g.mul(y)?)?)?)?;
    inv_std.mul(inner)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.dims().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid(op, "operands live on different tapes"))
        }
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other, name)?;
        let v = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.tape.push_op(v, op(self.id, other.id)))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push_op(v, op)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|a| -a, Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|a| a + c, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(f64::sin, Op::Sin(self.id))
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(f64::cos, Op::Cos(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(|a| a.powf(p), Op::Powf(self.id, p))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|a| a.max(0.0), Op::Relu(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let v = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.tape.push_op(v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let v = tensor::transpose2(&self.value())?;
        Ok(self.tape.push_op(v, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(dims)?;
        Ok(self.tape.push_op(v, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push_op(v, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Squared Frobenius norm.
    pub fn sum_sq(&self) -> Result<Var<'t>> {
        Ok(self.square()?.sum())
    }

    pub fn frobenius(&self) -> Result<Var<'t>> {
        Ok(self.sum_sq()?.powf(0.5))
    }

    /// Broadcasts this length-`k` vector over an `outer x k x inner` layout.
    pub fn expand(&self, outer: usize, inner: usize, out_dims: &[usize]) -> Result<Var<'t>> {
        let v = tensor::expand_mid(&self.value(), outer, inner, out_dims)?;
        Ok(self.tape.push_op(v, Op::Expand { v: self.id, outer, inner }))
    }

    /// Sums an `outer x k x inner` layout down to `out_dims` (`k` values).
    pub fn reduce(&self, outer: usize, inner: usize, out_dims: &[usize]) -> Result<Var<'t>> {
        let v = tensor::reduce_mid(&self.value(), outer, inner, out_dims)?;
        Ok(self.tape.push_op(v, Op::Reduce { x: self.id, outer, inner }))
    }

    pub fn conv2d(&self, weight: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        self.same_tape(&weight, "conv2d")?;
        let v = tensor::conv2d(&self.value(), &weight.value(), geom)?;
        Ok(self.tape.push_op(v, Op::Conv2d { x: self.id, w: weight.id, geom }))
    }

    fn conv2d_input_grad(&self, weight: Var<'t>, in_hw: (usize, usize), geom: ConvGeom) -> Result<Var<'t>> {
        let v = tensor::conv2d_input_grad(&self.value(), &weight.value(), in_hw, geom)?;
        Ok(self.tape.push_op(v, Op::ConvInputGrad { g: self.id, w: weight.id, geom }))
    }

    fn conv2d_weight_grad(&self, g: Var<'t>, kernel: (usize, usize), geom: ConvGeom) -> Result<Var<'t>> {
        let v = tensor::conv2d_weight_grad(&self.value(), &g.value(), kernel, geom)?;
        Ok(self.tape.push_op(v, Op::ConvWeightGrad { x: self.id, g: g.id, geom }))
    }

    pub fn avgpool2d(&self, k: usize) -> Result<Var<'t>> {
        let v = tensor::avgpool2d(&self.value(), k)?;
        Ok(self.tape.push_op(v, Op::AvgPool { x: self.id, k }))
    }

    fn avgpool2d_t(&self, k: usize, in_hw: (usize, usize)) -> Result<Var<'t>> {
        let v = tensor::avgpool2d_t(&self.value(), k, in_hw)?;
        Ok(self.tape.push_op(v, Op::AvgPoolT { g: self.id, k }))
    }

    /// Index-map gather: `out[i] = self[src[i]]`, zero for [`tensor::NO_SOURCE`].
    pub fn gather_with(&self, src: Arc<[u32]>, out_dims: &[usize]) -> Result<Var<'t>> {
        let v = tensor::gather(&self.value(), &src, out_dims)?;
        Ok(self.tape.push_op(v, Op::Gather { x: self.id, src }))
    }

    fn scatter_with(&self, src: Arc<[u32]>, out_dims: &[usize]) -> Result<Var<'t>> {
        let v = tensor::scatter_add(&self.value(), &src, out_dims)?;
        Ok(self.tape.push_op(v, Op::Scatter { g: self.id, src }))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t>> {
        let d = self.dims();
        if d.len() != 4 || factor == 0 {
            return Err(Error::invalid("upsample_nearest", format!("bad input {d:?} for factor {factor}")));
        }
        let (h, w) = (d[2], d[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut src = Vec::with_capacity(d[0] * d[1] * ho * wo);
        for p in 0..d[0] * d[1] {
            for y in 0..ho {
                for x in 0..wo {
                    src.push((p * h * w + (y / factor) * w + x / factor) as u32);
                }
            }
        }
        self.gather_with(src.into(), &[d[0], d[1], ho, wo])
    }

    /// Group normalization over NCHW with `groups` groups, no affine part.
    pub fn group_norm(&self, groups: usize, eps: f64) -> Result<Var<'t>> {
        let d = self.dims();
        if d.len() != 4 || groups == 0 || d[1] % groups != 0 {
            return Err(Error::invalid("group_norm", format!("{groups} groups do not divide input {d:?}")));
        }
        let y = tensor::group_norm(&self.value(), groups, eps)?;
        Ok(self.tape.push_op(y, Op::GroupNorm { x: self.id, groups, eps }))
    }

    /// Mean softmax cross-entropy of `(batch, classes)` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let d = self.dims();
        if d.len() != 2 || d[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &d, &[labels.len()]));
        }
        let (b, k) = (d[0], d[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let logits = self.value();
        let row_max: Vec<f64> = logits
            .data()
            .chunks(k)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = self.tape.constant(Tensor::from_parts(vec![b], row_max));
        let shifted = self.sub(shift.expand(1, k, &d)?)?;
        let lse = shifted.exp().reduce(1, k, &[b])?.ln();
        let mut onehot = vec![0.0; b * k];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * k + l] = 1.0;
        }
        let picked = shifted.mul(self.tape.constant(Tensor::from_parts(d.clone(), onehot)))?.reduce(1, k, &[b])?;
        Ok(lse.sub(picked)?.mean())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let loss = x.square().unwrap().sum();
        let g = tape.grad(loss, &[x], false).unwrap();
        assert_eq!(g[0].value().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_order_on_one_parameter_model() {
        // loss = (d/dw (w*s)^2)^2 = (2 w s^2)^2 = 4 w^2 s^4, d/ds = 16 w^2 s^3
        let tape = Tape::new();
        let (w0, s0) = (0.7, -1.3);
        let w = tape.var(Tensor::scalar(w0));
        let s = tape.var(Tensor::scalar(s0));
        let inner = w.mul(s).unwrap().square().unwrap();
        let gw = tape.grad(inner, &[w], true).unwrap()[0];
        let outer = gw.square().unwrap();
        let gs = tape.grad(outer, &[s], false).unwrap()[0];
        let expect = 16.0 * w0 * w0 * s0.powi(3);
        assert!((gs.value().item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn foreign_var_is_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.var(Tensor::scalar(1.0));
        let y = b.var(Tensor::scalar(2.0));
        let loss = x.square().unwrap();
        assert!(matches!(a.grad(loss, &[y], false), Err(Error::NotOnTape)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(&[3]));
        assert!(tape.grad(x, &[x], false).is_err());
    }

    #[test]
    fn unreachable_target_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(&[2]));
        let y = tape.var(Tensor::ones(&[3]));
        let g = tape.grad(x.sum(), &[y], false).unwrap();
        assert_eq!(g[0].value(), Tensor::zeros(&[3]));
    }

    #[test]
    fn first_order_backward_records_nothing_differentiable() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let loss = x.square().unwrap().sum();
        let g = tape.grad(loss, &[x], false).unwrap()[0];
        assert!(!g.requires_grad());
        let g2 = tape.grad(loss, &[x], true).unwrap()[0];
        assert!(g2.requires_grad());
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 3, 3], |i| ((i * 37) % 17) as f64 * 0.3 - 1.0));
        let y = x.group_norm(2, 1e-5).unwrap().value();
        for row in y.data().chunks(18) {
            let mean = row.iter().sum::<f64>() / 18.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    fn gn_probe<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let c = Tensor::from_fn(&x.dims(), |i| (i as f64 * 0.7).sin());
        x.group_norm(2, 1e-5)?.mul(t.constant(c))?.sum_sq()
    }

    fn gn_second<'t>(t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
        // squared norm of the input gradient exercises the recorded adjoint
        let y = gn_probe(t, v[0])?;
        t.grad(y, &[v[0]], true)?[0].sum_sq()
    }

    fn gn_first<'t>(t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
        gn_probe(t, v[0])
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        use crate::gradcheck::grad_check;
        let x = Tensor::from_fn(&[2, 4, 2, 2], |i| ((i * 13) % 7) as f64 * 0.4 - 1.1);
        assert!(grad_check(gn_first, &[x.clone()], 1e-6).unwrap() < 1e-7);
        let e = grad_check(gn_second, &[x], 1e-6).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let l = x.cross_entropy(&[0, 3]).unwrap().value().item().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(x.cross_entropy(&[0, 4]).is_err());
    }
}
