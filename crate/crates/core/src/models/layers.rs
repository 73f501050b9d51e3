use super::Bound;
use crate::error::Result;
use crate::tensor::{Graph, Mask, Real, Var};

pub(crate) const LN_EPS: f64 = 1e-6;
/// Finite stand-in for −∞ on masked attention logits.
pub(crate) const MASKED: f64 = -1e9;

/// `x·W + b` over the last axis, with leading axes flattened into one gemm.
pub(crate) fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let shape = g.shape(x).to_vec();
    let fan_in = *shape.last().expect("rank >= 1");
    let rows = shape[..shape.len() - 1].iter().product::<usize>();
    let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, fan_in])? };
    let y = g.matmul(flat, w)?;
    let y = g.add(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = g.shape(y)[1];
    if out_shape.len() == 2 {
        Ok(y)
    } else {
        Ok(g.reshape(y, &out_shape)?)
    }
}

pub(crate) fn norm<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let n = g.mul(n, p.var(&format!("{name}.gain"))?)?;
    Ok(g.add(n, p.var(&format!("{name}.bias"))?)?)
}

/// `[b, n, w]` → `[b, heads, n, w/heads]`.
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    Ok(g.transpose(x, 1, 2)?)
}

fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.transpose(x, 1, 2)?;
    Ok(g.reshape(x, &[s[0], s[2], s[1] * s[3]])?)
}

/// Multihead attention of `xq` (`[bq, nq, w]`, `bq` 1 or the batch) over `xkv`
/// (`[b, nk, w]`). Returns the output and the attention probabilities `[b, h, nq, nk]`.
pub(crate) fn attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let width = *g.shape(xq).last().unwrap();
    let q = linear(g, p, &format!("{name}.q"), xq)?;
    let k = linear(g, p, &format!("{name}.k"), xkv)?;
    let v = linear(g, p, &format!("{name}.v"), xkv)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let kt = g.transpose(k, 2, 3)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / ((width / heads) as f64).sqrt())?;
    let scores = match mask {
        Some(m) => g.masked_fill(scores, m, MASKED)?,
        None => scores,
    };
    let probs = g.softmax(scores, 3)?;
    let out = g.matmul(probs, v)?;
    let out = merge_heads(g, out)?;
    Ok((linear(g, p, &format!("{name}.o"), out)?, probs))
}

pub(crate) fn mlp<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, p, &format!("{name}.fc2"), h)
}

/// Pre-norm transformer block; returns the new residual stream and attention probabilities.
pub(crate) fn block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let h = norm(g, p, &format!("{name}.norm1"), x)?;
    let (a, probs) = attention(g, p, &format!("{name}.attn"), h, h, heads, mask)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{name}.norm2"), x)?;
    let m = mlp(g, p, &format!("{name}.mlp"), h)?;
    Ok((g.add(x, m)?, probs))
}
