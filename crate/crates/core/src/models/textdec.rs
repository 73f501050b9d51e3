use super::layers::{block, linear, norm};
use super::params::{self, Init};
use super::{Bound, Params, TextConfig, TextDecoderConfig};
use crate::error::{invalid, Result};
use crate::scenes::{END, PAD};
use crate::tensor::{Graph, Mask, Real, Tensor, Var};

pub(crate) fn init<T: Real>(p: &mut Params<T>, init: &mut Init, t: &TextConfig, cfg: &TextDecoderConfig) {
    let w = cfg.width;
    params::linear(p, init, "tdec.start", t.embed_dim, w);
    p.insert("tdec.tokens", init.normal(&[t.vocab_size, w], 0.02));
    p.insert("tdec.pos", init.normal(&[t.context, w], 0.02));
    for i in 0..cfg.depth {
        params::block(p, init, &format!("tdec.blocks.{i}"), w, 4);
    }
    params::norm(p, "tdec.norm", w);
    // Zero head: uniform predictions at init.
    p.insert("tdec.head.w", Tensor::zeros(vec![w, t.vocab_size]));
    p.insert("tdec.head.b", Tensor::zeros(vec![t.vocab_size]));
}

/// Caption words followed by the end token, cut to `context − 1` positions.
pub fn decoder_targets(words: &[u32], context: usize) -> Vec<u32> {
    words.iter().copied().chain([END]).take(context.saturating_sub(1)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct TextDecodeOutput {
    /// `[b, len, vocab]`.
    pub logits: Var,
    /// Mean next-token cross-entropy over non-pad target positions, `[1]`.
    pub loss: Var,
}

/// Causal decoder whose first input is a projection of `embedding`; position k predicts
/// `targets[k]` from the embedding and `targets[..k]`. Targets are padded with the pad id
/// to a common length.
pub fn text_decode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    tcfg: &TextConfig,
    cfg: &TextDecoderConfig,
    embedding: Var,
    targets: &[Vec<u32>],
) -> Result<TextDecodeOutput> {
    let b = targets.len();
    if b == 0 || g.shape(embedding) != [b, tcfg.embed_dim] {
        return Err(invalid("text_decode", "embedding rows must match the number of targets"));
    }
    if targets.iter().any(|t| t.iter().all(|&x| x == PAD)) {
        return Err(invalid("text_decode", "empty target"));
    }
    let len = targets.iter().map(Vec::len).max().unwrap();
    if len + 1 > tcfg.context {
        return Err(invalid("text_decode", format!("target length {len} exceeds context − 1 = {}", tcfg.context - 1)));
    }
    let v = tcfg.vocab_size;
    if let Some(&bad) = targets.iter().flatten().find(|&&t| t as usize >= v) {
        return Err(invalid("text_decode", format!("token id {bad} outside the vocabulary")));
    }
    let padded: Vec<Vec<u32>> = targets
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.resize(len, PAD);
            t
        })
        .collect();
    let w = cfg.width;
    let start = linear(g, p, "tdec.start", embedding)?;
    let start = g.reshape(start, &[b, 1, w])?;
    let mut x = start;
    if len > 1 {
        let ids: Vec<usize> = padded.iter().flat_map(|t| t[..len - 1].iter().map(|&i| i as usize)).collect();
        let tok = g.gather_rows(p.var("tdec.tokens")?, &ids)?;
        let tok = g.reshape(tok, &[b, len - 1, w])?;
        x = g.concat(&[start, tok], 1)?;
    }
    let pos = g.gather_rows(p.var("tdec.pos")?, &(0..len).collect::<Vec<_>>())?;
    let mut x = g.add(x, pos)?;
    let causal = Mask::causal(len);
    for i in 0..cfg.depth {
        x = block(g, p, &format!("tdec.blocks.{i}"), x, cfg.heads, Some(&causal))?.0;
    }
    let x = norm(g, p, "tdec.norm", x)?;
    let logits = linear(g, p, "tdec.head", x)?;
    let logp = g.log_softmax(logits, 2)?;
    let mut pick = vec![T::zero(); b * len * v];
    let mut count = 0usize;
    for (i, t) in padded.iter().enumerate() {
        for (k, &id) in t.iter().enumerate() {
            if id != PAD {
                pick[(i * len + k) * v + id as usize] = T::one();
                count += 1;
            }
        }
    }
    let pick = g.constant(Tensor::new(vec![b, len, v], pick)?);
    let picked = g.mul(logp, pick)?;
    let total = g.sum_all(picked)?;
    let loss = g.scale(total, -1.0 / count as f64)?;
    Ok(TextDecodeOutput { logits, loss })
}
