use super::layers::{block, linear, norm};
use super::params::{self, Init};
use super::{Bound, Params, TextConfig};
use crate::error::{invalid, Result};
use crate::tensor::{Graph, Real, Var};

pub(crate) fn init<T: Real>(p: &mut Params<T>, init: &mut Init, cfg: &TextConfig) {
    let w = cfg.width;
    p.insert("text.tokens", init.normal(&[cfg.vocab_size, w], 0.02));
    p.insert("text.pos", init.normal(&[cfg.context, w], 0.02));
    for i in 0..cfg.depth {
        params::block(p, init, &format!("text.blocks.{i}"), w, cfg.mlp_ratio);
    }
    params::norm(p, "text.norm", w);
    params::linear(p, init, "text.head", w, cfg.embed_dim);
}

/// Non-causal encoder over padded sequences of exactly `context` ids, pooled at
/// `pool_index`; returns unit rows `[b, embed_dim]`.
pub fn encode_text<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &TextConfig, tokens: &[Vec<u32>]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(invalid("encode_text", "empty batch"));
    }
    let c = cfg.context;
    let mut ids = Vec::with_capacity(tokens.len() * c);
    for seq in tokens {
        if seq.len() != c {
            return Err(invalid("encode_text", format!("sequence of length {} (context is {c})", seq.len())));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(invalid("encode_text", format!("token id {bad} outside the vocabulary of {}", cfg.vocab_size)));
        }
        ids.extend(seq.iter().map(|&t| t as usize));
    }
    let b = tokens.len();
    let x = g.gather_rows(p.var("text.tokens")?, &ids)?;
    let x = g.reshape(x, &[b, c, cfg.width])?;
    let mut x = g.add(x, p.var("text.pos")?)?;
    for i in 0..cfg.depth {
        x = block(g, p, &format!("text.blocks.{i}"), x, cfg.heads, None)?.0;
    }
    let x = norm(g, p, "text.norm", x)?;
    let flat = g.reshape(x, &[b * c, cfg.width])?;
    let pooled = g.gather_rows(flat, &(0..b).map(|i| i * c + cfg.pool_index).collect::<Vec<_>>())?;
    let e = linear(g, p, "text.head", pooled)?;
    Ok(g.l2_normalize(e)?)
}
