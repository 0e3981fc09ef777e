//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Nodes are
//! appended in execution order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep. A tape lives
//! for one forward/backward pass; build a fresh one per optimizer step.
//!
//! Broadcasting is deliberately narrow: a binary op accepts two equal shapes,
//! or one operand that is a single element, or one operand whose shape is a
//! suffix of the other's (`[d]` against `[n, d]`). In every admitted case the
//! smaller operand repeats cyclically over the larger, which is what the
//! forward and backward kernels rely on.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{bail, Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Train or eval behavior for mode-dependent ops (batch norm, dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Names of recorded operations, used in reports and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Relu,
    Sigmoid,
    Abs,
    ConcatLast,
    SegmentSum,
    SegmentMax,
    GatherRows,
    RowScale,
    BatchNorm,
    Dropout,
    Sum,
    Mean,
    Max,
    SoftmaxCrossEntropy,
    BceWithLogits,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Abs,
        OpKind::ConcatLast,
        OpKind::SegmentSum,
        OpKind::SegmentMax,
        OpKind::GatherRows,
        OpKind::RowScale,
        OpKind::BatchNorm,
        OpKind::Dropout,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Max,
        OpKind::SoftmaxCrossEntropy,
        OpKind::BceWithLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Abs => "abs",
            OpKind::ConcatLast => "concat_last_dim",
            OpKind::SegmentSum => "segment_sum",
            OpKind::SegmentMax => "segment_max",
            OpKind::GatherRows => "gather_rows",
            OpKind::RowScale => "row_scale",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "reduce_sum",
            OpKind::Mean => "reduce_mean",
            OpKind::Max => "reduce_max",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Running statistics for batch normalization (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![S::zero(); dim],
            var: vec![S::one(); dim],
        }
    }
}

/// Batch-norm hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

type Ids = Arc<[usize]>;

enum Op<S: Scalar> {
    Leaf,
    MatMul(usize, usize),
    Binary {
        kind: OpKind,
        a: usize,
        b: usize,
    },
    Neg(usize),
    Scale(usize, S),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    ConcatLast {
        inputs: Vec<usize>,
        widths: Vec<usize>,
    },
    SegmentSum {
        a: usize,
        ids: Ids,
    },
    SegmentMax {
        a: usize,
        argmax: Vec<Option<usize>>,
    },
    GatherRows {
        a: usize,
        index: Ids,
    },
    RowScale {
        a: usize,
        coef: Rc<[S]>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Dropout {
        a: usize,
        mask: Vec<S>,
    },
    Reduce {
        kind: OpKind,
        a: usize,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    SoftmaxCe {
        logits: usize,
        probs: Vec<S>,
        labels: Vec<usize>,
    },
    Bce {
        logits: usize,
        targets: Vec<S>,
    },
}

impl<S: Scalar> Op<S> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Binary { kind, .. } => *kind,
            Op::Neg(_) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Abs(_) => OpKind::Abs,
            Op::ConcatLast { .. } => OpKind::ConcatLast,
            Op::SegmentSum { .. } => OpKind::SegmentSum,
            Op::SegmentMax { .. } => OpKind::SegmentMax,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::RowScale { .. } => OpKind::RowScale,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Reduce { kind, .. } => *kind,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Bce { .. } => OpKind::BceWithLogits,
        })
    }
}

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Recording of one forward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    fault: Cell<Option<OpKind>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    /// Makes the backward rule of `kind` emit gradients scaled by 1.5.
    /// Exists so the gradient checker can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, true, Op::Leaf)
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&self, value: S) -> Var<'_, S> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        // Ops with no differentiable input are stored as constants so that
        // nothing downstream of them ever enters the backward sweep.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        if !std::ptr::eq(loss.tape, self) {
            bail!(Argument, "loss was recorded on a different tape");
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            bail!(State, "backward on an empty tape");
        }
        let loss_val = &nodes[loss.id].value;
        if loss_val.numel() != 1 {
            bail!(Shape, "loss must be scalar, got shape {:?}", loss_val.shape());
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::ones(loss_val.shape().to_vec()));
        }
        let fault = self.fault.get();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut sink = Sink {
                nodes: &nodes,
                grads: &mut grads,
                factor: if fault.is_some() && fault == node.op.kind() {
                    Some(S::lit(1.5))
                } else {
                    None
                },
            };
            backward_rule(node, &g, &mut sink);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Accumulates input gradients during the backward sweep.
struct Sink<'a, S: Scalar> {
    nodes: &'a [Node<S>],
    grads: &'a mut Vec<Option<Tensor<S>>>,
    factor: Option<S>,
}

impl<'a, S: Scalar> Sink<'a, S> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn value(&self, id: usize) -> &'a Tensor<S> {
        let nodes: &'a [Node<S>] = self.nodes;
        &nodes[id].value
    }

    fn add(&mut self, id: usize, data: Vec<S>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let shape = self.nodes[id].value.shape().to_vec();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut data = data;
        if let Some(f) = self.factor {
            for x in &mut data {
                *x *= f;
            }
        }
        match &mut self.grads[id] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
            }
        }
    }
}

/// Sums a full-size buffer down to a cyclically repeated operand of `len`
/// elements.
fn fold_to<S2: Scalar>(full: Vec<S2>, len: usize) -> Vec<S2> {
    if full.len() == len {
        return full;
    }
    let mut out = vec![S2::zero(); len];
    for (i, v) in full.into_iter().enumerate() {
        out[i % len] += v;
    }
    out
}

fn backward_rule<S: Scalar>(node: &Node<S>, g: &Tensor<S>, sink: &mut Sink<'_, S>) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (sink.value(*a), sink.value(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if sink.wants(*a) {
                let mut da = vec![S::zero(); m * k];
                S::gemm(m, n, k, gd, false, bv.data(), true, S::zero(), &mut da);
                sink.add(*a, da);
            }
            if sink.wants(*b) {
                let mut db = vec![S::zero(); k * n];
                S::gemm(k, m, n, av.data(), true, gd, false, S::zero(), &mut db);
                sink.add(*b, db);
            }
        }
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let (pa, pb) = (sink.value(a).numel(), sink.value(b).numel());
            let ad = sink.value(a).data();
            let bd = sink.value(b).data();
            let n = gd.len();
            let (ga, gb): (Option<Vec<S>>, Option<Vec<S>>) = match kind {
                OpKind::Add => (
                    sink.wants(a).then(|| gd.to_vec()),
                    sink.wants(b).then(|| gd.to_vec()),
                ),
                OpKind::Sub => (
                    sink.wants(a).then(|| gd.to_vec()),
                    sink.wants(b).then(|| gd.iter().map(|&x| -x).collect()),
                ),
                OpKind::Mul => (
                    sink.wants(a).then(|| (0..n).map(|i| gd[i] * bd[i % pb]).collect()),
                    sink.wants(b).then(|| (0..n).map(|i| gd[i] * ad[i % pa]).collect()),
                ),
                OpKind::Div => (
                    sink.wants(a).then(|| (0..n).map(|i| gd[i] / bd[i % pb]).collect()),
                    sink.wants(b).then(|| {
                        (0..n)
                            .map(|i| {
                                let bv = bd[i % pb];
                                -gd[i] * ad[i % pa] / (bv * bv)
                            })
                            .collect()
                    }),
                ),
                _ => unreachable!("not a binary op"),
            };
            if let Some(ga) = ga {
                sink.add(a, fold_to(ga, pa));
            }
            if let Some(gb) = gb {
                sink.add(b, fold_to(gb, pb));
            }
        }
        Op::Neg(a) => sink.add(*a, gd.iter().map(|&x| -x).collect()),
        Op::Scale(a, c) => sink.add(*a, gd.iter().map(|&x| x * *c).collect()),
        Op::Relu(a) => {
            let x = sink.value(*a).data();
            let d = gd
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                .collect();
            sink.add(*a, d);
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            let d = gd
                .iter()
                .zip(y)
                .map(|(&g, &y)| g * y * (S::one() - y))
                .collect();
            sink.add(*a, d);
        }
        Op::Abs(a) => {
            let x = sink.value(*a).data();
            let d = gd
                .iter()
                .zip(x)
                .map(|(&g, &x)| {
                    if x > S::zero() {
                        g
                    } else if x < S::zero() {
                        -g
                    } else {
                        S::zero()
                    }
                })
                .collect();
            sink.add(*a, d);
        }
        Op::ConcatLast { inputs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = gd.len().checked_div(total).unwrap_or(0);
            let mut offset = 0;
            for (&inp, &w) in inputs.iter().zip(widths) {
                if sink.wants(inp) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    sink.add(inp, d);
                }
                offset += w;
            }
        }
        Op::SegmentSum { a, ids } => {
            let c = row_width(node.value.as_ref());
            let mut d = Vec::with_capacity(ids.len() * c);
            for &s in ids.iter() {
                d.extend_from_slice(&gd[s * c..(s + 1) * c]);
            }
            sink.add(*a, d);
        }
        Op::SegmentMax { a, argmax } => {
            let c = row_width(node.value.as_ref());
            let mut d = vec![S::zero(); sink.value(*a).numel()];
            for (o, src) in argmax.iter().enumerate() {
                if let Some(r) = src {
                    d[r * c + o % c] += gd[o];
                }
            }
            sink.add(*a, d);
        }
        Op::GatherRows { a, index } => {
            let c = row_width(node.value.as_ref());
            let mut d = vec![S::zero(); sink.value(*a).numel()];
            for (i, &src) in index.iter().enumerate() {
                for j in 0..c {
                    d[src * c + j] += gd[i * c + j];
                }
            }
            sink.add(*a, d);
        }
        Op::RowScale { a, coef } => {
            let c = row_width(node.value.as_ref());
            let d = gd
                .iter()
                .enumerate()
                .map(|(i, &g)| g * coef[i / c])
                .collect();
            sink.add(*a, d);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let d = inv_std.len();
            let n = gd.len() / d;
            let gam = sink.value(*gamma).data();
            let mut dgamma = vec![S::zero(); d];
            let mut dbeta = vec![S::zero(); d];
            for i in 0..n {
                for j in 0..d {
                    dgamma[j] += gd[i * d + j] * xhat[i * d + j];
                    dbeta[j] += gd[i * d + j];
                }
            }
            if sink.wants(*x) {
                let mut dx = vec![S::zero(); n * d];
                if *train {
                    let nf = S::lit(n as f64);
                    // dxhat = g·gamma; sums reuse dbeta/dgamma scaled by gamma.
                    for j in 0..d {
                        let sum_dxhat = dbeta[j] * gam[j];
                        let sum_dxhat_xhat = dgamma[j] * gam[j];
                        for i in 0..n {
                            let dxhat = gd[i * d + j] * gam[j];
                            dx[i * d + j] = inv_std[j] / nf
                                * (nf * dxhat - sum_dxhat - xhat[i * d + j] * sum_dxhat_xhat);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] = gd[i * d + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                sink.add(*x, dx);
            }
            sink.add(*gamma, dgamma);
            sink.add(*beta, dbeta);
        }
        Op::Dropout { a, mask } => {
            sink.add(*a, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect());
        }
        Op::Reduce {
            kind,
            a,
            axis,
            argmax,
        } => {
            let shape = sink.value(*a).shape().to_vec();
            let total: usize = shape.iter().product();
            let (outer, len, inner) = split_axis(&shape, *axis);
            let mut d = vec![S::zero(); total];
            match kind {
                OpKind::Sum | OpKind::Mean => {
                    let scale = if *kind == OpKind::Mean {
                        S::one() / S::lit(len as f64)
                    } else {
                        S::one()
                    };
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                d[(o * len + l) * inner + i] = gd[o * inner + i] * scale;
                            }
                        }
                    }
                }
                OpKind::Max => {
                    for o in 0..outer {
                        for i in 0..inner {
                            let l = argmax[o * inner + i];
                            d[(o * len + l) * inner + i] += gd[o * inner + i];
                        }
                    }
                }
                _ => unreachable!("not a reduction"),
            }
            sink.add(*a, d);
        }
        Op::SoftmaxCe {
            logits,
            probs,
            labels,
        } => {
            let b = labels.len();
            let c = probs.len() / b.max(1);
            let scale = gd[0] / S::lit(b as f64);
            let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                d[i * c + y] -= scale;
            }
            sink.add(*logits, d);
        }
        Op::Bce { logits, targets } => {
            let x = sink.value(*logits).data();
            let scale = gd[0] / S::lit(targets.len() as f64);
            let d = x
                .iter()
                .zip(targets)
                .map(|(&x, &y)| (sigmoid(x) - y) * scale)
                .collect();
            sink.add(*logits, d);
        }
    }
}

fn row_width<S: Scalar>(t: &Tensor<S>) -> usize {
    if t.ndim() <= 1 {
        1
    } else {
        t.shape()[1..].iter().product()
    }
}

/// (outer, axis length, inner) decomposition; `None` reduces everything.
fn split_axis(shape: &[usize], axis: Option<usize>) -> (usize, usize, usize) {
    match axis {
        None => (1, shape.iter().product(), 1),
        Some(a) => (
            shape[..a].iter().product(),
            shape[a],
            shape[a + 1..].iter().product(),
        ),
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Number of materialized gradient buffers.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(self) -> Rc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.requires(self.id)
    }

    fn emit(self, value: Tensor<S>, inputs: &[usize], op: Op<S>) -> Var<'t, S> {
        let rg = inputs.iter().any(|&i| self.tape.requires(i));
        self.tape.push(value, rg, op)
    }

    fn same_tape(self, other: Var<'_, S>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            bail!(Argument, "operands recorded on different tapes")
        }
    }

    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            bail!(
                Dimension,
                "matmul of {:?} and {:?}: inner dimensions differ",
                a.shape(),
                b.shape()
            );
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![S::zero(); m * n];
        S::gemm(m, k, n, a.data(), false, b.data(), false, S::zero(), &mut c);
        let out = Tensor::new([m, n], c)?;
        Ok(self.emit(out, &[self.id, other.id], Op::MatMul(self.id, other.id)))
    }

    fn binary(self, other: Var<'t, S>, kind: OpKind, f: impl Fn(S, S) -> S) -> Result<Var<'t, S>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::Dimension(format!(
                "{kind}: shapes {:?} and {:?} are not broadcast-compatible",
                a.shape(),
                b.shape()
            ))
        })?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<S> = if ad.len() == n && bd.len() == n {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else if ad.is_empty() || bd.is_empty() {
            Vec::new()
        } else {
            (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect()
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.emit(
            out,
            &[self.id, other.id],
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, OpKind::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, OpKind::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, OpKind::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, OpKind::Div, |a, b| a / b)
    }

    /// Adds a constant to every element.
    pub fn add_scalar(self, c: S) -> Var<'t, S> {
        let k = self.tape.scalar(c);
        self.add(k).expect("scalar broadcast")
    }

    pub fn neg(self) -> Var<'t, S> {
        let out = self.value().map(|x| -x);
        self.emit(out, &[self.id], Op::Neg(self.id))
    }

    pub fn scale(self, c: S) -> Var<'t, S> {
        let out = self.value().map(|x| x * c);
        self.emit(out, &[self.id], Op::Scale(self.id, c))
    }

    pub fn relu(self) -> Var<'t, S> {
        let out = self.value().map(|x| if x > S::zero() { x } else { S::zero() });
        self.emit(out, &[self.id], Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        let out = self.value().map(sigmoid);
        self.emit(out, &[self.id], Op::Sigmoid(self.id))
    }

    pub fn abs(self) -> Var<'t, S> {
        let out = self.value().map(|x| x.abs());
        self.emit(out, &[self.id], Op::Abs(self.id))
    }

    /// Concatenates along the last dimension; all other dims must agree.
    pub fn concat_last(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let Some(first) = parts.first() else {
            bail!(Argument, "concat of no operands");
        };
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = &vals[0].shape()[..vals[0].ndim().saturating_sub(1)];
        for (p, v) in parts.iter().zip(&vals) {
            first.same_tape(*p)?;
            if v.ndim() == 0 || &v.shape()[..v.ndim() - 1] != lead {
                bail!(
                    Dimension,
                    "concat_last_dim: {:?} vs {:?}",
                    vals[0].shape(),
                    v.shape()
                );
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let inputs: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(out, &inputs, Op::ConcatLast { inputs: inputs.clone(), widths }))
    }

    /// `out[s] = Σ_{i: ids[i] = s} self[i]`; empty segments are zero rows.
    pub fn segment_sum(self, ids: &Arc<[usize]>, num_segments: usize) -> Result<Var<'t, S>> {
        let v = self.value();
        check_rows(&v, ids.len(), "segment_sum")?;
        let c = row_width(&v);
        let mut data = vec![S::zero(); num_segments * c];
        for (i, &s) in ids.iter().enumerate() {
            if s >= num_segments {
                bail!(Index, "segment id {s} out of range for {num_segments} segments");
            }
            for j in 0..c {
                data[s * c + j] += v.data()[i * c + j];
            }
        }
        let out = Tensor::new(seg_shape(&v, num_segments), data)?;
        Ok(self.emit(
            out,
            &[self.id],
            Op::SegmentSum {
                a: self.id,
                ids: Arc::clone(ids),
            },
        ))
    }

    /// Per-segment columnwise max; empty segments yield zero rows. Ties go
    /// to the lowest row index.
    pub fn segment_max(self, ids: &[usize], num_segments: usize) -> Result<Var<'t, S>> {
        let v = self.value();
        check_rows(&v, ids.len(), "segment_max")?;
        let c = row_width(&v);
        let mut data = vec![S::zero(); num_segments * c];
        let mut argmax: Vec<Option<usize>> = vec![None; num_segments * c];
        for (i, &s) in ids.iter().enumerate() {
            if s >= num_segments {
                bail!(Index, "segment id {s} out of range for {num_segments} segments");
            }
            for j in 0..c {
                let x = v.data()[i * c + j];
                let o = s * c + j;
                if argmax[o].is_none() || x > data[o] {
                    data[o] = x;
                    argmax[o] = Some(i);
                }
            }
        }
        let out = Tensor::new(seg_shape(&v, num_segments), data)?;
        Ok(self.emit(out, &[self.id], Op::SegmentMax { a: self.id, argmax }))
    }

    /// `out[i] = self[index[i]]`.
    pub fn gather_rows(self, index: &Arc<[usize]>) -> Result<Var<'t, S>> {
        let v = self.value();
        if v.ndim() == 0 {
            bail!(Dimension, "gather_rows on a scalar");
        }
        let n = v.rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            bail!(Index, "gather index {bad} out of range for {n} rows");
        }
        let out = v.select_rows(index);
        Ok(self.emit(
            out,
            &[self.id],
            Op::GatherRows {
                a: self.id,
                index: Arc::clone(index),
            },
        ))
    }

    /// Multiplies row `i` by the constant `coef[i]`.
    pub fn row_scale(self, coef: &Rc<[S]>) -> Result<Var<'t, S>> {
        let v = self.value();
        check_rows(&v, coef.len(), "row_scale")?;
        let c = row_width(&v);
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * coef[i / c])
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            &[self.id],
            Op::RowScale {
                a: self.id,
                coef: Rc::clone(coef),
            },
        ))
    }

    /// Batch normalization over the rows of an `[N, d]` input.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch statistics into `stats` with exponential momentum; eval mode
    /// normalizes with `stats` as-is.
    pub fn batch_norm(
        self,
        gamma: Var<'t, S>,
        beta: Var<'t, S>,
        stats: &mut RunningStats<S>,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var<'t, S>> {
        let x = self.value();
        if x.ndim() != 2 {
            bail!(Dimension, "batchnorm expects [N, d], got {:?}", x.shape());
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if gamma.value().numel() != d || beta.value().numel() != d || stats.mean.len() != d {
            bail!(
                Dimension,
                "batchnorm affine/stat sizes must equal feature dim {d}"
            );
        }
        let eps = S::lit(cfg.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                if n == 0 {
                    return Err(Error::EmptyBatch("batchnorm in train mode needs N >= 1".into()));
                }
                let nf = S::lit(n as f64);
                let mut mean = vec![S::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        mean[j] += x.data()[i * d + j];
                    }
                }
                for m in &mut mean {
                    *m /= nf;
                }
                let mut var = vec![S::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        let c = x.data()[i * d + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                for v in &mut var {
                    *v /= nf;
                }
                let mom = S::lit(cfg.momentum);
                for j in 0..d {
                    stats.mean[j] = (S::one() - mom) * stats.mean[j] + mom * mean[j];
                    stats.var[j] = (S::one() - mom) * stats.var[j] + mom * var[j];
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (g, b) = (gamma.value(), beta.value());
        let mut xhat = vec![S::zero(); n * d];
        let mut y = vec![S::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (x.data()[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                y[i * d + j] = g.data()[j] * h + b.data()[j];
            }
        }
        let out = Tensor::new([n, d], y)?;
        Ok(self.emit(
            out,
            &[self.id, gamma.id, beta.id],
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout(self, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Var<'t, S>> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate {rate} outside [0, 1)");
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(self);
        }
        let v = self.value();
        let keep = S::lit(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..v.numel())
            .map(|_| if rng.uniform() < rate { S::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.emit(out, &[self.id], Op::Dropout { a: self.id, mask }))
    }

    fn reduce(self, kind: OpKind, axis: Option<usize>) -> Result<Var<'t, S>> {
        let v = self.value();
        if let Some(a) = axis {
            if a >= v.ndim() {
                bail!(Dimension, "axis {a} invalid for shape {:?}", v.shape());
            }
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        if len == 0 && kind != OpKind::Sum {
            bail!(Dimension, "{kind} over an empty axis");
        }
        let mut data = vec![S::zero(); outer * inner];
        let mut argmax = Vec::new();
        let x = v.data();
        match kind {
            OpKind::Sum | OpKind::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            data[o * inner + i] += x[(o * len + l) * inner + i];
                        }
                    }
                }
                if kind == OpKind::Mean {
                    let lf = S::lit(len as f64);
                    for d in &mut data {
                        *d /= lf;
                    }
                }
            }
            OpKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = x[o * len * inner + i];
                        let mut at = 0;
                        for l in 1..len {
                            let c = x[(o * len + l) * inner + i];
                            if c > best {
                                best = c;
                                at = l;
                            }
                        }
                        data[o * inner + i] = best;
                        argmax[o * inner + i] = at;
                    }
                }
            }
            _ => unreachable!("not a reduction"),
        }
        let shape = match axis {
            None => vec![],
            Some(a) => {
                let mut s = v.shape().to_vec();
                s.remove(a);
                s
            }
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.emit(
            out,
            &[self.id],
            Op::Reduce {
                kind,
                a: self.id,
                axis,
                argmax,
            },
        ))
    }

    /// Sum over `axis`, or over everything when `None`.
    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t, S>> {
        self.reduce(OpKind::Sum, axis)
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'t, S>> {
        self.reduce(OpKind::Mean, axis)
    }

    /// Max over `axis`; the gradient flows to the first maximal element.
    pub fn max(self, axis: Option<usize>) -> Result<Var<'t, S>> {
        self.reduce(OpKind::Max, axis)
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t, S>> {
        let v = self.value();
        if v.ndim() != 2 || v.rows() != labels.len() {
            bail!(
                Dimension,
                "cross-entropy logits {:?} vs {} labels",
                v.shape(),
                labels.len()
            );
        }
        if labels.is_empty() {
            bail!(Dimension, "cross-entropy over zero items");
        }
        let c = v.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            bail!(Index, "class {bad} out of range for {c} logits");
        }
        let mut probs = Vec::with_capacity(v.numel());
        let mut total = S::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = v.row(i);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln() + m;
            total += lz - row[y];
            probs.extend(row.iter().map(|&x| (x - lz).exp()));
        }
        let out = Tensor::scalar(total / S::lit(labels.len() as f64));
        Ok(self.emit(
            out,
            &[self.id],
            Op::SoftmaxCe {
                logits: self.id,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean sigmoid binary cross-entropy over all elements.
    pub fn bce_with_logits(self, targets: &[S]) -> Result<Var<'t, S>> {
        let v = self.value();
        if v.numel() != targets.len() || targets.is_empty() {
            bail!(
                Dimension,
                "bce logits {:?} vs {} targets",
                v.shape(),
                targets.len()
            );
        }
        let total: S = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(S::zero()) - x * y + (S::one() + (-x.abs()).exp()).ln())
            .sum();
        let out = Tensor::scalar(total / S::lit(targets.len() as f64));
        Ok(self.emit(
            out,
            &[self.id],
            Op::Bce {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }
}

fn check_rows<S: Scalar>(v: &Tensor<S>, expected: usize, op: &str) -> Result<()> {
    let rows = if v.ndim() == 0 { 1 } else { v.rows() };
    if rows != expected {
        bail!(
            Dimension,
            "{op}: {} rows in {:?} but {} ids",
            rows,
            v.shape(),
            expected
        );
    }
    Ok(())
}

fn seg_shape<S: Scalar>(v: &Tensor<S>, n: usize) -> Vec<usize> {
    let mut shape = v.shape().to_vec();
    if shape.is_empty() {
        shape.push(n);
    } else {
        shape[0] = n;
    }
    shape
}

/// Output shape under the restricted broadcast rules, if compatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (na, nb) = (a.iter().product::<usize>(), b.iter().product::<usize>());
    if a == b {
        return Some(a.to_vec());
    }
    if nb == 1 && b.len() <= a.len() {
        return Some(a.to_vec());
    }
    if na == 1 && a.len() <= b.len() {
        return Some(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}
