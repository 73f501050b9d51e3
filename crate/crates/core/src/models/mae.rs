use rand::seq::SliceRandom;

use super::layers::{block, linear, norm};
use super::params::{self, Init};
use super::{Bound, MaeConfig, Params, VisionConfig};
use crate::error::{invalid, Result};
use crate::scenes::Image;
use crate::tensor::{Graph, Real, Tensor, Var};

const NORM_PIX_EPS: f64 = 1e-6;

pub(crate) fn init<T: Real>(p: &mut Params<T>, init: &mut Init, v: &VisionConfig, cfg: &MaeConfig) {
    let w = cfg.width;
    params::linear(p, init, "mae.in", v.width, w);
    params::linear(p, init, "mae.bottleneck", v.embed_dim, w);
    p.insert("mae.mask_token", init.normal(&[1, w], 0.02));
    p.insert("mae.pos", init.normal(&[v.patches() + 1, w], 0.02));
    for i in 0..cfg.depth {
        params::block(p, init, &format!("mae.blocks.{i}"), w, 4);
    }
    params::norm(p, "mae.norm", w);
    params::linear(p, init, "mae.out", w, v.patch_dim());
}

/// `⌈ratio·patches⌉` masked positions (true = masked), chosen uniformly by `seed`.
pub fn patch_mask(patches: usize, ratio: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid("patch_mask", format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n = (ratio * patches as f64).ceil() as usize;
    if n >= patches {
        return Err(invalid("patch_mask", format!("ratio {ratio} masks all {patches} patches")));
    }
    let mut order: Vec<usize> = (0..patches).collect();
    order.shuffle(&mut crate::rng::rng_for(&[seed, crate::rng::purpose::MASK]));
    let mut mask = vec![false; patches];
    for &i in &order[..n] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Raw `[b, patches, patch_dim]` pixels, optionally normalized per patch.
pub fn patchify_targets<T: Real>(images: &[Image], patch: usize, norm_pix: bool) -> Result<Tensor<T>> {
    let centred = super::patchify::<f64>(images, patch)?;
    let shape = centred.shape().to_vec();
    let pd = shape[2];
    let mut out = Vec::with_capacity(centred.numel());
    for row in centred.data().chunks_exact(pd) {
        let px = row.iter().map(|v| v / 2.0 + 0.5);
        if norm_pix {
            let mean = row.iter().map(|v| v / 2.0 + 0.5).sum::<f64>() / pd as f64;
            let var = row.iter().map(|v| (v / 2.0 + 0.5 - mean).powi(2)).sum::<f64>() / pd as f64;
            let rs = 1.0 / (var + NORM_PIX_EPS).sqrt();
            out.extend(px.map(|v| T::of((v - mean) * rs)));
        } else {
            out.extend(px.map(T::of));
        }
    }
    Ok(Tensor::new(shape, out)?)
}

#[derive(Debug, Clone)]
pub struct MaeOutput {
    /// Mean squared error over masked patches, `[1]`.
    pub loss: Var,
    /// Predicted pixels of the masked patches `[m, patch_dim]`, in mask order.
    pub prediction: Option<Var>,
    /// Per-image mask, true = masked.
    pub masks: Vec<Vec<bool>>,
}

/// Decodes masked patches from the unmasked patch features plus the pooled embedding,
/// prepended as a bottleneck token. Masking happens at the decoder input; the encoder
/// saw the full view.
#[allow(clippy::too_many_arguments)]
pub fn mae_reconstruct<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    vcfg: &VisionConfig,
    cfg: &MaeConfig,
    patches: Var,
    embedding: Var,
    images: &[Image],
    mask_seed: u64,
) -> Result<MaeOutput> {
    let shape = g.shape(patches).to_vec();
    let (b, np) = (shape[0], shape[1]);
    if images.len() != b || np != vcfg.patches() {
        return Err(invalid("mae_reconstruct", "patch features do not match the images"));
    }
    if g.shape(embedding) != [b, vcfg.embed_dim] {
        return Err(invalid("mae_reconstruct", "embedding batch does not match the patch features"));
    }
    let masks = (0..b)
        .map(|i| patch_mask(np, cfg.mask_ratio, crate::rng::mix(&[mask_seed, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let masked: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.iter().enumerate().filter(|(_, &x)| x).map(move |(j, _)| i * np + j))
        .collect();
    if masked.is_empty() {
        let zero = g.constant(Tensor::scalar(T::zero()));
        return Ok(MaeOutput { loss: zero, prediction: None, masks });
    }
    let w = cfg.width;
    let h = linear(g, p, "mae.in", patches)?;
    let h = g.reshape(h, &[b * np, w])?;
    let with_token = g.concat(&[h, p.var("mae.mask_token")?], 0)?;
    let token_row = b * np;
    let mut is_masked = vec![false; b * np];
    masked.iter().for_each(|&k| is_masked[k] = true);
    let pick: Vec<usize> = (0..b * np).map(|k| if is_masked[k] { token_row } else { k }).collect();
    let h = g.gather_rows(with_token, &pick)?;
    let h = g.reshape(h, &[b, np, w])?;
    let z = linear(g, p, "mae.bottleneck", embedding)?;
    let z = g.reshape(z, &[b, 1, w])?;
    let x = g.concat(&[z, h], 1)?;
    let mut x = g.add(x, p.var("mae.pos")?)?;
    for i in 0..cfg.depth {
        x = block(g, p, &format!("mae.blocks.{i}"), x, cfg.heads, None)?.0;
    }
    let x = norm(g, p, "mae.norm", x)?;
    let flat = g.reshape(x, &[b * (np + 1), w])?;
    let rows: Vec<usize> = masked.iter().map(|&k| (k / np) * (np + 1) + 1 + k % np).collect();
    let sel = g.gather_rows(flat, &rows)?;
    let pred = linear(g, p, "mae.out", sel)?;
    let targets = patchify_targets::<T>(images, vcfg.patch_size, cfg.norm_pix)?;
    let pd = vcfg.patch_dim();
    let mut tdata = Vec::with_capacity(masked.len() * pd);
    for &k in &masked {
        tdata.extend_from_slice(&targets.data()[k * pd..(k + 1) * pd]);
    }
    let target = g.constant(Tensor::new(vec![masked.len(), pd], tdata)?);
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean_all(sq)?;
    Ok(MaeOutput { loss, prediction: Some(pred), masks })
}
