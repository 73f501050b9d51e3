use std::sync::atomic::{AtomicU64, Ordering};

use super::broadcast::{split_axis, strides_of, IndexMap};
use super::{numel, Real, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) index: usize,
    pub(crate) graph: u64,
}

/// Boolean mask broadcast against the trailing axes of the tensor it masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, bits: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != bits.len() {
            return Err(TensorError::DataLength {
                shape,
                len: bits.len(),
            });
        }
        Ok(Self { shape, bits })
    }

    /// `true` strictly above the diagonal of an `n×n` matrix (future positions).
    pub fn causal(n: usize) -> Self {
        let bits = (0..n * n).map(|i| i % n > i / n).collect();
        Self {
            shape: vec![n, n],
            bits,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Gradient rule of an operation defined outside the primitive set.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;
    /// Returns one gradient per input (`None` when the input receives none).
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>>;
}

pub(crate) enum Op<T: Real> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Gelu(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LayerNorm { x: usize, rstd: Vec<T> },
    L2Normalize { x: usize, inv_norm: Vec<T> },
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Transpose(usize, usize, usize),
    Concat(Vec<usize>, usize),
    GatherRows(usize, Vec<usize>),
    MaskedFill(usize, Mask),
    Custom(Vec<usize>, Box<dyn CustomOp<T>>),
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Reshape(_) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::GatherRows(..) => "gather_rows",
            Op::MaskedFill(..) => "masked_fill",
            Op::Custom(_, op) => op.name(),
        }
    }
}

pub(crate) struct Node<T: Real> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// The computation record: an append-only tape of primitive applications.
///
/// A graph is confined to one thread; tensors moved in and out of it are plain values.
pub struct Graph<T: Real> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input that gradients are requested for.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("var belongs to this graph").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).map(|n| n.op.name()).unwrap_or("foreign")
    }

    pub(crate) fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(&self.nodes[v.index])
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        self.node(v).map(|_| v.index)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            index,
            graph: self.id,
        }
    }

    pub(crate) fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records an operation whose forward value was computed by the caller and whose
    /// gradient rule is supplied by `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let rg = self.grad_flag(&idx);
        Ok(self.push(value, Op::Custom(idx, op), rg))
    }

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Nodes are visited in reverse record order; each node hands its gradient to
    /// its inputs in argument order, and contributions are summed in that order.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.node(output)?;
        if out.value.numel() != 1 {
            return Err(TensorError::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if out.requires_grad {
            grads[output.index] = Some(vec![T::one()]);
        }
        for i in (0..=output.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            flags: self.nodes.iter().map(|n| n.requires_grad && matches!(n.op, Op::Leaf)).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: usize, contribution: Vec<T>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Sums a broadcast gradient back to the operand's shape.
    fn unbroadcast(&self, g: &[T], operand: usize, out_shape: &[usize]) -> Vec<T> {
        let shape = self.nodes[operand].value.shape();
        let map = IndexMap::new(shape, out_shape);
        if let IndexMap::Same = map {
            return g.to_vec();
        }
        let mut acc = vec![T::zero(); numel(shape)];
        match map {
            IndexMap::Suffix(n) => {
                for c in g.chunks_exact(n) {
                    for (a, &gi) in acc.iter_mut().zip(c) {
                        *a = *a + gi;
                    }
                }
                return acc;
            }
            IndexMap::Repeat(inner) => {
                for (a, c) in acc.iter_mut().zip(g.chunks_exact(inner)) {
                    *a = c.iter().fold(T::zero(), |s, &v| s + v);
                }
                return acc;
            }
            _ => {}
        }
        for (i, &gi) in g.iter().enumerate() {
            let j = map.get(i);
            acc[j] = acc[j] + gi;
        }
        acc
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let out_shape = node.value.shape();
        let val = |k: usize| self.nodes[k].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ga, gb) = super::ops::matmul_backward(
                    &self.nodes[*a].value,
                    &self.nodes[*b].value,
                    g,
                    out_shape,
                    self.nodes[*a].requires_grad,
                    self.nodes[*b].requires_grad,
                );
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                let ga = self.unbroadcast(g, *a, out_shape);
                self.accumulate(grads, *a, ga);
                let gb = self.unbroadcast(g, *b, out_shape);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.unbroadcast(g, *a, out_shape);
                self.accumulate(grads, *a, ga);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                let gb = self.unbroadcast(&neg, *b, out_shape);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (ma, mb) = (IndexMap::new(sa, out_shape), IndexMap::new(sb, out_shape));
                let (da, db) = (val(*a), val(*b));
                if self.nodes[*a].requires_grad {
                    let prod: Vec<T> = g.iter().enumerate().map(|(k, &gk)| gk * db[mb.get(k)]).collect();
                    let ga = self.unbroadcast(&prod, *a, out_shape);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[*b].requires_grad {
                    let prod: Vec<T> = g.iter().enumerate().map(|(k, &gk)| gk * da[ma.get(k)]).collect();
                    let gb = self.unbroadcast(&prod, *b, out_shape);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let ga = g.iter().map(|&x| x * *s).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(y).map(|(&gk, &yk)| gk * yk).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = g.iter().zip(val(*a)).map(|(&gk, &xk)| gk / xk).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .iter()
                    .zip(y)
                    .map(|(&gk, &s)| gk * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::LogSigmoid(a) => {
                // d/dx log σ(x) = σ(-x)
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gk, &x)| gk * super::ops::sigmoid(-x))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gk, &x)| gk * super::ops::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut ga = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let mut dot = T::zero();
                        for k in 0..len {
                            let p = base + k * inner;
                            dot = dot + g[p] * y[p];
                        }
                        for k in 0..len {
                            let p = base + k * inner;
                            ga[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut ga = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let mut total = T::zero();
                        for k in 0..len {
                            total = total + g[base + k * inner];
                        }
                        for k in 0..len {
                            let p = base + k * inner;
                            ga[p] = g[p] - y[p].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, rstd } => {
                let d = *out_shape.last().expect("rank >= 1");
                let inv_d = T::one() / T::of(d as f64);
                let mut ga = vec![T::zero(); g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let (gr, yr) = (&g[row.clone()], &y[row.clone()]);
                    let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for (k, out) in ga[row].iter_mut().enumerate() {
                        *out = rs * (gr[k] - mean_g - yr[k] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::L2Normalize { x, inv_norm } => {
                let d = *out_shape.last().expect("rank >= 1");
                let mut ga = vec![T::zero(); g.len()];
                for (r, &inv) in inv_norm.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let (gr, yr) = (&g[row.clone()], &y[row.clone()]);
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for (k, out) in ga[row].iter_mut().enumerate() {
                        *out = inv * (gr[k] - yr[k] * dot);
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let in_shape = self.nodes[*x].value.shape();
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::of(len as f64)
                } else {
                    T::one()
                };
                let mut ga = vec![T::zero(); numel(in_shape)];
                for o in 0..outer {
                    for k in 0..len {
                        for j in 0..inner {
                            ga[(o * len + k) * inner + j] = g[o * inner + j] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let n = self.nodes[*x].value.numel();
                let scale = if matches!(node.op, Op::MeanAll(_)) {
                    T::one() / T::of(n as f64)
                } else {
                    T::one()
                };
                self.accumulate(grads, *x, vec![g[0] * scale; n]);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Transpose(x, a, b) => {
                // Swapping the same two axes again is its own inverse.
                let ga = super::ops::transpose_data(g, out_shape, *a, *b);
                self.accumulate(grads, *x, ga);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis];
                    if self.nodes[p].requires_grad {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let in_shape = self.nodes[*x].value.shape();
                let row = numel(&in_shape[1..]);
                let mut ga = vec![T::zero(); numel(in_shape)];
                for (r, &src) in idx.iter().enumerate() {
                    for k in 0..row {
                        ga[src * row + k] = ga[src * row + k] + g[r * row + k];
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::MaskedFill(x, mask) => {
                let m = mask.bits();
                let n = m.len();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| if m[k % n] { T::zero() } else { gk })
                    .collect();
                self.accumulate(grads, *x, ga);
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&k| &self.nodes[k].value).collect();
                let out = op.backward(&values, &node.value, g);
                for (&k, gk) in inputs.iter().zip(out) {
                    if let Some(gk) = gk {
                        self.accumulate(grads, k, gk);
                    }
                }
            }
        }
    }
}

/// Gradients of one backward sweep, keyed by the leaf they belong to.
pub struct Gradients<T: Real> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    flags: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` for constants and non-leaf values.
    pub fn get(&self, v: Var) -> Result<Option<&Tensor<T>>> {
        if v.graph != self.graph || v.index >= self.grads.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(self.grads[v.index].as_ref())
    }

    /// Gradient of a gradient-requiring leaf; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Result<Tensor<T>> {
        if v.graph != self.graph || v.index >= self.grads.len() {
            return Err(TensorError::ForeignVar);
        }
        if !self.flags[v.index] {
            return Err(TensorError::Invalid {
                op: "gradients",
                msg: "variable is not a gradient-requiring leaf".into(),
            });
        }
        Ok(self.grads[v.index]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index].clone())))
    }

    /// Moves a gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Result<Option<Tensor<T>>> {
        if v.graph != self.graph || v.index >= self.grads.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(self.grads[v.index].take())
    }
}

pub(crate) fn transpose_shape(shape: &[usize], a: usize, b: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.swap(a, b);
    s
}

pub(crate) fn permuted_strides(shape: &[usize], a: usize, b: usize) -> Vec<usize> {
    let mut st = strides_of(shape);
    st.swap(a, b);
    st
}
