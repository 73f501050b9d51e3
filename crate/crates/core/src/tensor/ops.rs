//! Forward rules of the primitive set. Gradient rules live in `graph.rs`.

use super::broadcast::{broadcast_shape, split_axis, IndexMap};
use super::graph::{permuted_strides, transpose_shape, Graph, Mask, Op, Var};
use super::{numel, Real, Result, Tensor, TensorError};

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn log_sigmoid<T: Real>(x: T) -> T {
    // min(x, 0) - log1p(exp(-|x|))
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

/// `tanh` through a single `exp`, cheaper than the libm routine.
#[inline]
fn tanh<T: Real>(u: T) -> T {
    T::one() - T::of(2.0) / (T::one() + (u + u).exp())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let u = c * (x + a * x * x * x);
    let th = tanh(u);
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

fn matmul_shapes(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, usize, usize, usize)> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let batch = broadcast_shape("matmul", &a[..a.len() - 2], &b[..b.len() - 2]).map_err(|_| mismatch())?;
    Ok((batch, m, k, n))
}

/// Batched matmul with broadcasting over leading axes.
fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n) = matmul_shapes(a.shape(), b.shape())?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let mut out = vec![T::zero(); numel(&out_shape)];
    if b.rank() == 2 {
        // Fold every leading axis of `a` into the row dimension.
        let rows = a.numel() / k;
        T::gemm(rows, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out, (n as isize, 1), false);
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let nb = numel(&batch);
    let map_a = IndexMap::new(&a.shape()[..a.rank() - 2], &batch);
    let map_b = IndexMap::new(&b.shape()[..b.rank() - 2], &batch);
    for i in 0..nb {
        let (ia, ib) = (map_a.get(i), map_b.get(i));
        T::gemm(
            m,
            k,
            n,
            &a.data()[ia * m * k..(ia + 1) * m * k],
            (k as isize, 1),
            &b.data()[ib * k * n..(ib + 1) * k * n],
            (n as isize, 1),
            &mut out[i * m * n..(i + 1) * m * n],
            (n as isize, 1),
            false,
        );
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    out_shape: &[usize],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let n = b.shape()[b.rank() - 1];
    let (ki, ni) = (k as isize, n as isize);
    if b.rank() == 2 {
        let rows = a.numel() / k;
        let ga = need_a.then(|| {
            let mut ga = vec![T::zero(); a.numel()];
            // dA = G · Bᵀ
            T::gemm(rows, n, k, g, (ni, 1), b.data(), (1, ni), &mut ga, (ki, 1), false);
            ga
        });
        let gb = need_b.then(|| {
            let mut gb = vec![T::zero(); b.numel()];
            // dB = Aᵀ · G
            T::gemm(k, rows, n, a.data(), (1, ki), g, (ni, 1), &mut gb, (ni, 1), false);
            gb
        });
        return (ga, gb);
    }
    let batch = &out_shape[..out_shape.len() - 2];
    let map_a = IndexMap::new(&a.shape()[..a.rank() - 2], batch);
    let map_b = IndexMap::new(&b.shape()[..b.rank() - 2], batch);
    let mut ga = need_a.then(|| vec![T::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.numel()]);
    for i in 0..numel(batch) {
        let (ia, ib) = (map_a.get(i), map_b.get(i));
        let gi = &g[i * m * n..(i + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            T::gemm(
                m,
                n,
                k,
                gi,
                (ni, 1),
                &b.data()[ib * k * n..(ib + 1) * k * n],
                (1, ni),
                &mut ga[ia * m * k..(ia + 1) * m * k],
                (ki, 1),
                true,
            );
        }
        if let Some(gb) = gb.as_mut() {
            T::gemm(
                k,
                m,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                (1, ki),
                gi,
                (ni, 1),
                &mut gb[ib * k * n..(ib + 1) * k * n],
                (ni, 1),
                true,
            );
        }
    }
    (ga, gb)
}

pub(crate) fn transpose_data<T: Real>(data: &[T], shape: &[usize], a: usize, b: usize) -> Vec<T> {
    let out_shape = transpose_shape(shape, a, b);
    let src_strides = permuted_strides(shape, a, b);
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    // Contiguous innermost run when neither swapped axis is the last one.
    let inner = if a != rank - 1 && b != rank - 1 { out_shape[rank - 1] } else { 1 };
    let outer_rank = if inner > 1 { rank - 1 } else { rank };
    let mut idx = vec![0usize; outer_rank];
    let total = data.len() / inner;
    for _ in 0..total {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner > 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.push(data[base]);
        }
        for ax in (0..outer_rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::Axis { op, axis, rank });
    }
    Ok(())
}

fn require_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if !t.is_finite() {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    fn unary(&mut self, x: Var, op: impl FnOnce(usize) -> Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let i = self.check(x)?;
        let node = &self.nodes[i];
        let data = node.value.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(node.value.shape().to_vec(), data);
        let rg = node.requires_grad;
        Ok(self.push(value, op(i), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: impl FnOnce(usize, usize) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let (ma, mb) = (IndexMap::new(ta.shape(), &shape), IndexMap::new(tb.shape(), &shape));
        let (da, db) = (ta.data(), tb.data());
        let data = match (&ma, &mb) {
            (IndexMap::Same, IndexMap::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (IndexMap::Same, IndexMap::Scalar) => da.iter().map(|&x| f(x, db[0])).collect(),
            (IndexMap::Same, IndexMap::Suffix(n)) => {
                da.chunks_exact(*n).flat_map(|c| c.iter().zip(db).map(|(&x, &y)| f(x, y))).collect()
            }
            (IndexMap::Same, IndexMap::Repeat(inner)) => {
                da.chunks_exact(*inner).zip(db).flat_map(|(c, &y)| c.iter().map(move |&x| (x, y))).map(|(x, y)| f(x, y)).collect()
            }
            _ => (0..numel(&shape)).map(|k| f(da[ma.get(k)], db[mb.get(k)])).collect(),
        };
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(shape, data), op(ia, ib), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = matmul_forward(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        self.unary(x, |i| Op::Scale(i, s), |v| v * s)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        require_finite("exp", &self.node(x)?.value)?;
        let out = self.unary(x, Op::Exp, |v| v.exp())?;
        require_finite("exp", &self.nodes[out.index].value)?;
        Ok(out)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        require_finite("log", t)?;
        if t.data().iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::Domain { op: "log" });
        }
        self.unary(x, Op::Log, |v| v.ln())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::LogSigmoid, log_sigmoid)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu, gelu)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        check_axis(name, axis, t.rank())?;
        require_finite(name, t)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(src[base + k * inner]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    total = total + e;
                }
                if log {
                    let lse = total.ln();
                    for k in 0..len {
                        let p = base + k * inner;
                        out[p] = src[p] - mx - lse;
                    }
                } else {
                    let inv = T::one() / total;
                    for k in 0..len {
                        out[base + k * inner] = out[base + k * inner] * inv;
                    }
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.nodes[i].requires_grad;
        let op = if log { Op::LogSoftmax(i, axis) } else { Op::Softmax(i, axis) };
        Ok(self.push(value, op, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        let d = *t.shape().last().expect("rank >= 1");
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let mut out = vec![T::zero(); t.numel()];
        let mut rstd = Vec::with_capacity(t.numel() / d);
        for (row, dst) in t.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(value, Op::LayerNorm { x: i, rstd }, rg))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        let d = *t.shape().last().expect("rank >= 1");
        let floor = T::of(1e-12);
        let mut out = vec![T::zero(); t.numel()];
        let mut inv_norm = Vec::with_capacity(t.numel() / d);
        for (row, dst) in t.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            let inv = T::one() / norm;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = v * inv;
            }
            inv_norm.push(inv);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(value, Op::L2Normalize { x: i, inv_norm }, rg))
    }

    fn reduce(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        check_axis(name, axis, t.rank())?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let scale = if mean { T::one() / T::of(len as f64) } else { T::one() };
        let src = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        let mut shape = t.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
        }
        let rg = self.nodes[i].requires_grad;
        let op = if mean { Op::Mean { x: i, axis } } else { Op::Sum { x: i, axis } };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, true)
    }

    /// Sum of every element, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s = self.nodes[i].value.data().iter().copied().sum::<T>();
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(Tensor::scalar(s), Op::SumAll(i), rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(i), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.nodes[i].value.reshaped(shape.to_vec())?;
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(value, Op::Reshape(i), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        check_axis("transpose", a.max(b), t.rank())?;
        let data = if a == b { t.data().to_vec() } else { transpose_data(t.data(), t.shape(), a, b) };
        let value = Tensor::from_parts(transpose_shape(t.shape(), a, b), data);
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(value, Op::Transpose(i, a, b), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.nodes[*first].value.shape().to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in &idx {
            let s = self.nodes[p].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(ax, (x, y))| ax == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in &idx {
                let t = &self.nodes[p].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.grad_flag(&idx);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(idx, axis), rg))
    }

    /// Selects rows (indices into the first axis), repetitions allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        let rows = t.shape()[0];
        let row = numel(&t.shape()[1..]);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &r in indices {
            if r >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    extent: rows,
                });
            }
            out.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(Tensor::from_parts(shape, out), Op::GatherRows(i, indices.to_vec()), rg))
    }

    /// Replaces masked positions with `value`; they receive zero gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &Mask, value: f64) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        let ms = mask.shape();
        if ms.len() > t.rank() || t.shape()[t.rank() - ms.len()..] != *ms {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: ms.to_vec(),
            });
        }
        let fill = T::of(value);
        let bits = mask.bits();
        let n = bits.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| if bits[k % n] { fill } else { v })
            .collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(value, Op::MaskedFill(i, mask.clone()), rg))
    }
}
