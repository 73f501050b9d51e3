use super::layers::{attention, block, linear, mlp, norm};
use super::params::{self, Init};
use super::{Bound, Params, Pool, VisionConfig};
use crate::error::{invalid, Result};
use crate::scenes::Image;
use crate::tensor::{Graph, Real, Tensor, Var};

pub(crate) fn init<T: Real>(p: &mut Params<T>, init: &mut Init, cfg: &VisionConfig) {
    let w = cfg.width;
    params::linear(p, init, "vision.patch", cfg.patch_dim(), w);
    p.insert("vision.pos", init.normal(&[cfg.patches(), w], 0.02));
    for i in 0..cfg.depth {
        params::block(p, init, &format!("vision.blocks.{i}"), w, cfg.mlp_ratio);
    }
    params::norm(p, "vision.norm", w);
    match cfg.pool {
        Pool::AttentionMap => {
            p.insert("vision.pool.probe", init.normal(&[1, 1, w], 0.02));
            for proj in ["q", "k", "v", "o"] {
                params::linear(p, init, &format!("vision.pool.attn.{proj}"), w, w);
            }
            params::norm(p, "vision.pool.norm", w);
            params::linear(p, init, "vision.pool.mlp.fc1", w, w * cfg.mlp_ratio);
            params::linear(p, init, "vision.pool.mlp.fc2", w * cfg.mlp_ratio, w);
        }
        Pool::ClassToken => p.insert("vision.cls", init.normal(&[1, w], 0.02)),
    }
    params::linear(p, init, "vision.head", w, cfg.embed_dim);
}

/// Rows of `patch × patch × 3` pixels in row-major patch order, centred to [−1, 1].
pub fn patchify<T: Real>(images: &[Image], patch: usize) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| invalid("patchify", "empty batch"))?;
    let size = first.height;
    if images.iter().any(|im| im.height != size || im.width != size) {
        return Err(invalid("patchify", "images must be square and share one size"));
    }
    if size % patch != 0 {
        return Err(invalid("patchify", format!("size {size} is not a multiple of patch {patch}")));
    }
    let grid = size / patch;
    let pd = patch * patch * 3;
    let mut data = Vec::with_capacity(images.len() * grid * grid * pd);
    for im in images {
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..patch {
                    let row = ((gy * patch + y) * size + gx * patch) * 3;
                    data.extend(im.data[row..row + patch * 3].iter().map(|&v| T::of((v as f64 - 0.5) * 2.0)));
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), grid * grid, pd], data)?)
}

/// Bilinear resampling matrix `[to², from²]` between square position grids.
fn grid_resample<T: Real>(from: usize, to: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); to * to * from * from];
    let coord = |i: usize| ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
    for ty in 0..to {
        for tx in 0..to {
            let (cy, cx) = (coord(ty), coord(tx));
            let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(from - 1), (x0 + 1).min(from - 1));
            let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
            let row = (ty * to + tx) * from * from;
            for (y, x, w) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                m[row + y * from + x] = m[row + y * from + x] + T::of(w);
            }
        }
    }
    Tensor::new(vec![to * to, from * from], m).expect("non-empty")
}

#[derive(Debug, Clone, Copy)]
pub struct VisionOutput {
    /// `[b, embed_dim]`, unit rows.
    pub embedding: Var,
    /// Final-normed patch tokens `[b, patches, width]`.
    pub patches: Var,
    /// Pooling attention of the query (or class token) over patches, `[b, heads, patches]`
    /// averaged across blocks.
    pub pool_attention: Var,
}

/// Encodes full-resolution images; any other size is an error.
pub fn encode_image<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &VisionConfig, images: &[Image]) -> Result<VisionOutput> {
    if let Some(im) = images.iter().find(|im| im.height != cfg.image_size || im.width != cfg.image_size) {
        return Err(invalid(
            "encode_image",
            format!("expected {0}x{0} pixels, got {1}x{2}", cfg.image_size, im.height, im.width),
        ));
    }
    encode_views(g, p, cfg, images)
}

/// Encodes square views of any size that is a multiple of the patch size and at most the
/// training resolution; position embeddings are bilinearly resampled for smaller views.
pub fn encode_views<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &VisionConfig, images: &[Image]) -> Result<VisionOutput> {
    let pixels = patchify::<T>(images, cfg.patch_size)?;
    let x = g.constant(pixels);
    encode_patches(g, p, cfg, x)
}

/// Encoder body on already patchified pixels `[b, grid², patch_dim]`.
pub fn encode_patches<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &VisionConfig, x: Var) -> Result<VisionOutput> {
    let s = g.shape(x).to_vec();
    let (b, np) = (s[0], s[1]);
    let grid = (np as f64).sqrt().round() as usize;
    if s.len() != 3 || grid * grid != np || s[2] != cfg.patch_dim() || grid > cfg.grid() {
        return Err(invalid("encode_patches", format!("patch tensor {s:?} does not fit the config")));
    }
    let w = cfg.width;
    let x = linear(g, p, "vision.patch", x)?;
    let mut pos = p.var("vision.pos")?;
    if grid != cfg.grid() {
        let m = g.constant(grid_resample(cfg.grid(), grid));
        pos = g.matmul(m, pos)?;
    }
    let mut x = g.add(x, pos)?;
    let with_cls = cfg.pool == Pool::ClassToken;
    if with_cls {
        let cls = g.gather_rows(p.var("vision.cls")?, &vec![0; b])?;
        let cls = g.reshape(cls, &[b, 1, w])?;
        x = g.concat(&[cls, x], 1)?;
    }
    let mut cls_rows = Vec::new();
    for i in 0..cfg.depth {
        let (nx, probs) = block(g, p, &format!("vision.blocks.{i}"), x, cfg.heads, None)?;
        x = nx;
        if with_cls {
            cls_rows.push(probs);
        }
    }
    let x = norm(g, p, "vision.norm", x)?;
    let (pooled, patches, pool_attention) = if with_cls {
        let n = np + 1;
        let flat = g.reshape(x, &[b * n, w])?;
        let cls = g.gather_rows(flat, &(0..b).map(|i| i * n).collect::<Vec<_>>())?;
        let rows: Vec<usize> = (0..b).flat_map(|i| (1..n).map(move |j| i * n + j)).collect();
        let patches = g.gather_rows(flat, &rows)?;
        let patches = g.reshape(patches, &[b, np, w])?;
        let att = class_token_attention(g, &cls_rows, b, cfg.heads, np)?;
        (cls, patches, att)
    } else {
        let probe = p.var("vision.pool.probe")?;
        let (a, probs) = attention(g, p, "vision.pool.attn", probe, x, cfg.heads, None)?;
        let h = norm(g, p, "vision.pool.norm", a)?;
        let m = mlp(g, p, "vision.pool.mlp", h)?;
        let pooled = g.add(a, m)?;
        let pooled = g.reshape(pooled, &[b, w])?;
        let att = g.reshape(probs, &[b, cfg.heads, np])?;
        (pooled, x, att)
    };
    let e = linear(g, p, "vision.head", pooled)?;
    let embedding = g.l2_normalize(e)?;
    Ok(VisionOutput { embedding, patches, pool_attention })
}

/// Class-token rows of every block, averaged and renormalized over the patch keys.
/// Recorded as a constant: the maps are a read-out, not a differentiable output.
fn class_token_attention<T: Real>(g: &mut Graph<T>, rows: &[Var], b: usize, heads: usize, np: usize) -> Result<Var> {
    let n = np + 1;
    let mut acc = vec![T::zero(); b * heads * np];
    for &r in rows {
        let v = g.value(r).data();
        for bh in 0..b * heads {
            // query 0 of this (batch, head); keys 1..n are patches
            let row = &v[bh * n * n..bh * n * n + n];
            for j in 0..np {
                acc[bh * np + j] = acc[bh * np + j] + row[j + 1];
            }
        }
    }
    for chunk in acc.chunks_mut(np) {
        let s = chunk.iter().copied().sum::<T>();
        chunk.iter_mut().for_each(|v| *v = *v / s);
    }
    Ok(g.constant(Tensor::new(vec![b, heads, np], acc)?))
}

pub use maps::{attention_maps, export_attention, AttentionMaps};

mod maps {
    use super::*;

    /// Per-head pooling-attention maps of one image.
    #[derive(Debug, Clone, PartialEq)]
    pub struct AttentionMaps {
        pub grid: usize,
        /// `heads × grid²`, each summing to 1.
        pub maps: Vec<Vec<f64>>,
    }

    impl AttentionMaps {
        /// Nearest-neighbour upsampling of head `h` to `size × size`.
        pub fn upsampled(&self, h: usize, size: usize) -> Vec<f64> {
            let m = &self.maps[h];
            (0..size * size)
                .map(|k| {
                    let (y, x) = (k / size * self.grid / size, k % size * self.grid / size);
                    m[y * self.grid + x]
                })
                .collect()
        }

        /// Patch index of the largest head-averaged weight (lowest index on ties).
        pub fn argmax(&self) -> usize {
            let n = self.grid * self.grid;
            let mean: Vec<f64> = (0..n).map(|j| self.maps.iter().map(|m| m[j]).sum::<f64>()).collect();
            let mut best = 0;
            for j in 1..n {
                if mean[j] > mean[best] {
                    best = j;
                }
            }
            best
        }
    }

    /// Splits a `[b, heads, patches]` attention value into per-image maps.
    pub fn attention_maps<T: Real>(att: &Tensor<T>) -> Vec<AttentionMaps> {
        let s = att.shape();
        let (b, heads, np) = (s[0], s[1], s[2]);
        let grid = (np as f64).sqrt().round() as usize;
        let d = att.data();
        (0..b)
            .map(|i| AttentionMaps {
                grid,
                maps: (0..heads).map(|h| d[(i * heads + h) * np..(i * heads + h + 1) * np].iter().map(|v| v.f64()).collect()).collect(),
            })
            .collect()
    }

    /// Forward pass with frozen parameters, returning the pooling maps of each image.
    pub fn export_attention<T: Real>(params: &Params<T>, cfg: &VisionConfig, images: &[Image]) -> Result<Vec<AttentionMaps>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let out = encode_image(&mut g, &p, cfg, images)?;
        Ok(attention_maps(g.value(out.pool_attention)))
    }
}
