use crate::error::{Error, Result};
use crate::losses::PairWeights;
use crate::tensor::{CustomOp, Graph, Real, Tensor, Var};

/// Allowed deviation of an embedding row's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// Temperature (stored as `log t`) and bias of the pairwise sigmoid loss.
///
/// A pair's logit is `t·x·y − b`, so `b = 10` gives a logit bias of −10.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScalars {
    pub log_t: f64,
    pub b: f64,
}

impl Default for LossScalars {
    fn default() -> Self {
        Self {
            log_t: 10f64.ln(),
            b: 10.0,
        }
    }
}

impl LossScalars {
    pub fn t(&self) -> f64 {
        self.log_t.exp()
    }
}

/// Graph handles for [`LossScalars`]; each is a `[1]` tensor.
#[derive(Debug, Clone, Copy)]
pub struct ScalarVars {
    pub log_t: Var,
    pub b: Var,
}

impl ScalarVars {
    pub fn leaves<T: Real>(g: &mut Graph<T>, s: LossScalars) -> Self {
        Self {
            log_t: g.leaf(Tensor::scalar(T::of(s.log_t))),
            b: g.leaf(Tensor::scalar(T::of(s.b))),
        }
    }

    pub fn constants<T: Real>(g: &mut Graph<T>, s: LossScalars) -> Self {
        Self {
            log_t: g.constant(Tensor::scalar(T::of(s.log_t))),
            b: g.constant(Tensor::scalar(T::of(s.b))),
        }
    }
}

fn check_inputs<T: Real>(op: &'static str, g: &Graph<T>, x: Var, y: Var, z: &PairWeights) -> Result<usize> {
    let (xs, ys) = (g.shape(x), g.shape(y));
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op,
            lhs: xs.to_vec(),
            rhs: ys.to_vec(),
        }
        .into());
    }
    if xs[0] != z.rows() {
        return Err(Error::LengthMismatch { op, left: xs[0], right: z.rows() });
    }
    if ys[0] != z.cols() {
        return Err(Error::LengthMismatch { op, left: ys[0], right: z.cols() });
    }
    for v in [x, y] {
        let d = g.shape(v)[1];
        for (row, chunk) in g.value(v).data().chunks_exact(d).enumerate() {
            let norm = chunk.iter().map(|a| a.f64() * a.f64()).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(Error::NotNormalized { op, row, norm });
            }
        }
    }
    Ok(xs[1])
}

/// `−(1/R) Σ_{z_ij≠0} log σ(z_ij (t·x_i·y_j − b))` over rows `x` (R×d) and columns `y` (C×d).
///
/// Built from graph primitives, so the full R×C logit matrix is materialized.
pub fn siglip_loss<T: Real>(g: &mut Graph<T>, x: Var, y: Var, s: ScalarVars, z: &PairWeights) -> Result<Var> {
    check_inputs("siglip_loss", g, x, y, z)?;
    let t = g.exp(s.log_t)?;
    let yt = g.transpose(y, 0, 1)?;
    let sim = g.matmul(x, yt)?;
    let scaled = g.mul(sim, t)?;
    let logits = g.sub(scaled, s.b)?;
    let zt = g.constant(z.as_tensor());
    let signed = g.mul(logits, zt)?;
    let ls = g.log_sigmoid(signed)?;
    let kept = g.masked_fill(ls, &z.zero_mask(), 0.0)?;
    let total = g.sum_all(kept)?;
    Ok(g.scale(total, -1.0 / z.rows() as f64)?)
}

/// Same value and gradients as [`siglip_loss`], evaluated over `chunk × chunk` tiles
/// in row-major tile order so that at most `chunk²` logits exist at a time.
pub fn blockwise_siglip_loss<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    y: Var,
    s: ScalarVars,
    z: &PairWeights,
    chunk: usize,
) -> Result<Var> {
    if chunk == 0 {
        return Err(crate::error::invalid("blockwise_siglip_loss", "chunk must be positive"));
    }
    let d = check_inputs("blockwise_siglip_loss", g, x, y, z)?;
    let op = Blockwise { z: z.clone(), chunk, d };
    let log_t = g.value(s.log_t).item();
    let b = g.value(s.b).item();
    let value = op.sweep(g.value(x).data(), g.value(y).data(), log_t, b, None);
    Ok(g.custom(&[x, y, s.log_t, s.b], Tensor::scalar(value), Box::new(op))?)
}

struct Blockwise {
    z: PairWeights,
    chunk: usize,
    d: usize,
}

struct BlockGrads<'a, T> {
    upstream: T,
    dx: &'a mut [T],
    dy: &'a mut [T],
    dt: &'a mut T,
    db: &'a mut T,
}

impl Blockwise {
    /// Returns the loss; when `grads` is given, also accumulates `∂loss/∂·` scaled by upstream.
    fn sweep<T: Real>(&self, x: &[T], y: &[T], log_t: T, b: T, mut grads: Option<BlockGrads<'_, T>>) -> T {
        let (rows, cols, d, c) = (self.z.rows(), self.z.cols(), self.d, self.chunk);
        let t = log_t.exp();
        let inv_rows = T::one() / T::of(rows as f64);
        let mut logits = vec![T::zero(); c.min(rows) * c.min(cols)];
        let mut dlogit = vec![T::zero(); logits.len()];
        let mut total = T::zero();
        for r0 in (0..rows).step_by(c) {
            let m = c.min(rows - r0);
            for c0 in (0..cols).step_by(c) {
                let n = c.min(cols - c0);
                let sim = &mut logits[..m * n];
                T::gemm(m, d, n, &x[r0 * d..], (d as isize, 1), &y[c0 * d..], (1, d as isize), sim, (n as isize, 1), false);
                let mut block = T::zero();
                for i in 0..m {
                    for j in 0..n {
                        let w = self.z.get(r0 + i, c0 + j);
                        if w == 0 {
                            dlogit[i * n + j] = T::zero();
                            continue;
                        }
                        let zw = T::of(w as f64);
                        let a = zw * (t * sim[i * n + j] - b);
                        block = block + crate::tensor::log_sigmoid(a);
                        // d/da log σ(a) = σ(−a)
                        dlogit[i * n + j] = -inv_rows * zw * crate::tensor::sigmoid(-a);
                    }
                }
                total = total + block;
                if let Some(gr) = grads.as_mut() {
                    let dl = &mut dlogit[..m * n];
                    for (v, &s) in dl.iter().zip(sim.iter()) {
                        *gr.dt = *gr.dt + gr.upstream * *v * s;
                        *gr.db = *gr.db - gr.upstream * *v;
                    }
                    let scale = gr.upstream * t;
                    dl.iter_mut().for_each(|v| *v = *v * scale);
                    // dx[r0..] += dl · y[c0..], dy[c0..] += dlᵀ · x[r0..]
                    T::gemm(m, n, d, dl, (n as isize, 1), &y[c0 * d..], (d as isize, 1), &mut gr.dx[r0 * d..], (d as isize, 1), true);
                    T::gemm(n, m, d, dl, (1, n as isize), &x[r0 * d..], (d as isize, 1), &mut gr.dy[c0 * d..], (d as isize, 1), true);
                }
            }
        }
        -total * inv_rows
    }
}

impl<T: Real> CustomOp<T> for Blockwise {
    fn name(&self) -> &'static str {
        "blockwise_siglip"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, y) = (inputs[0].data(), inputs[1].data());
        let (log_t, b) = (inputs[2].item(), inputs[3].item());
        let mut dx = vec![T::zero(); x.len()];
        let mut dy = vec![T::zero(); y.len()];
        let (mut dt, mut db) = (T::zero(), T::zero());
        self.sweep(
            x,
            y,
            log_t,
            b,
            Some(BlockGrads {
                upstream: grad[0],
                dx: &mut dx,
                dy: &mut dy,
                dt: &mut dt,
                db: &mut db,
            }),
        );
        // ∂/∂log t = t·∂/∂t
        let dlog_t = dt * log_t.exp();
        vec![Some(dx), Some(dy), Some(vec![dlog_t]), Some(vec![db])]
    }
}
