use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::LossScalars;
use crate::models::{encode_image, encode_text, mae_reconstruct, patchify_targets, ModelConfig, Params};
use crate::rng::{mix, purpose};
use crate::scenes::{caption, random_edit, render, Color, Image, SceneSpec, Shape, Vocab};
use crate::tensor::{Graph, Real};

const EVAL_BATCH: usize = 128;

fn rows<T: Real>(g: &Graph<T>, v: crate::tensor::Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    let d = t.shape()[1];
    t.data().chunks_exact(d).map(|r| r.iter().map(|x| x.f64()).collect()).collect()
}

/// Image embeddings without recording gradients. `params` may be a full student or a
/// teacher holding only the image encoder.
pub fn embed_images<T: Real>(params: &Params<T>, cfg: &ModelConfig, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let e = encode_image(&mut g, &p, &cfg.vision, chunk)?.embedding;
        out.extend(rows(&g, e));
    }
    Ok(out)
}

pub fn embed_texts<T: Real>(params: &Params<T>, cfg: &ModelConfig, captions: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    let vocab = Vocab::shared();
    let mut out = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(EVAL_BATCH) {
        let toks: Vec<Vec<u32>> = chunk.iter().map(|c| vocab.encoder_input(c, cfg.text.context)).collect();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let e = encode_text(&mut g, &p, &cfg.text, &toks)?;
        out.extend(rows(&g, e));
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub n: usize,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub i2t_r1: f64,
    pub i2t_r5: f64,
}

/// Zero-based rank of `truth` among `scores`; equal scores rank the lower index first.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < truth)).count()
}

/// Recall@1/5 in both directions for aligned pairs `images[i] ↔ texts[i]`, ranking by
/// `t·x·y − b`.
pub fn evaluate_retrieval(images: &[Vec<f64>], texts: &[Vec<f64>], s: LossScalars) -> Result<Retrieval> {
    if images.is_empty() {
        return Err(invalid("evaluate_retrieval", "empty split"));
    }
    if images.len() != texts.len() {
        return Err(Error::LengthMismatch { op: "evaluate_retrieval", left: images.len(), right: texts.len() });
    }
    let n = images.len();
    let t = s.t();
    let sim: Vec<Vec<f64>> = images.iter().map(|x| texts.iter().map(|y| t * dot(x, y) - s.b).collect()).collect();
    let (mut t1, mut t5, mut i1, mut i5) = (0, 0, 0, 0);
    for q in 0..n {
        let col: Vec<f64> = (0..n).map(|i| sim[i][q]).collect();
        let r = rank_of(&col, q);
        t1 += (r < 1) as usize;
        t5 += (r < 5) as usize;
        let r = rank_of(&sim[q], q);
        i1 += (r < 1) as usize;
        i5 += (r < 5) as usize;
    }
    let f = |k: usize| k as f64 / n as f64;
    Ok(Retrieval { n, t2i_r1: f(t1), t2i_r5: f(t5), i2t_r1: f(i1), i2t_r5: f(i5) })
}

fn normalized_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        m.iter_mut().for_each(|v| *v /= n);
    }
    m
}

/// Accuracy of nearest-class-prompt classification; a class embedding is the renormalized
/// mean of its prompt embeddings. Ties go to the lower class index.
pub fn evaluate_zero_shot(images: &[Vec<f64>], labels: &[usize], prompts: &[Vec<Vec<f64>>]) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(invalid("evaluate_zero_shot", "need one label per image and at least one image"));
    }
    if let Some(c) = prompts.iter().position(|p| p.is_empty()) {
        return Err(invalid("evaluate_zero_shot", format!("class {c} has no prompts")));
    }
    if labels.iter().any(|&l| l >= prompts.len()) {
        return Err(invalid("evaluate_zero_shot", "label outside the class list"));
    }
    let classes: Vec<Vec<f64>> = prompts.iter().map(|p| normalized_mean(p)).collect();
    let correct = images
        .iter()
        .zip(labels)
        .filter(|(x, &l)| {
            let scores: Vec<f64> = classes.iter().map(|c| dot(x, c)).collect();
            rank_of(&scores, l) == 0
        })
        .count();
    Ok(correct as f64 / images.len() as f64)
}

/// Colour-and-shape classes of single-group scenes.
#[derive(Debug, Clone)]
pub struct ZeroShotTask {
    pub class_names: Vec<String>,
    /// Prompt captions per class.
    pub prompts: Vec<Vec<Vec<u32>>>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

pub fn attribute_classes() -> Vec<(Color, Shape)> {
    Color::ALL.iter().flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s))).collect()
}

fn class_of(spec: &SceneSpec) -> usize {
    let g = &spec.groups[0];
    attribute_classes().iter().position(|&(c, s)| c == g.color && s == g.shape).expect("every look is a class")
}

impl ZeroShotTask {
    /// Every single-group scene rendered `renders` times with seeds derived from `seed`;
    /// prompts are every caption template of every single-group scene of the class.
    pub fn build(size: usize, renders: usize, seed: u64) -> Result<Self> {
        let singles: Vec<SceneSpec> = SceneSpec::enumerate().into_iter().filter(|s| s.groups.len() == 1).collect();
        let classes = attribute_classes();
        let mut prompts = vec![Vec::new(); classes.len()];
        for s in &singles {
            for t in 0..crate::scenes::TEMPLATES as u64 {
                prompts[class_of(s)].push(caption(s, t));
            }
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, s) in singles.iter().enumerate() {
            for r in 0..renders {
                images.push(render(s, size, mix(&[seed, purpose::EVAL, i as u64, r as u64]))?);
                labels.push(class_of(s));
            }
        }
        let class_names = classes.iter().map(|(c, s)| format!("{} {}", c.word(), s.word())).collect();
        Ok(Self { class_names, prompts, images, labels })
    }

    pub fn evaluate<T: Real>(&self, image_params: &Params<T>, params: &Params<T>, cfg: &ModelConfig) -> Result<f64> {
        let x = embed_images(image_params, cfg, &self.images)?;
        let p = self.prompts.iter().map(|ps| embed_texts(params, cfg, ps)).collect::<Result<Vec<_>>>()?;
        evaluate_zero_shot(&x, &self.labels, &p)
    }
}

/// Two scenes differing by one semantic edit, rendered and captioned.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruple {
    pub images: [Image; 2],
    pub captions: [Vec<u32>; 2],
}

impl Quadruple {
    pub fn validate(&self) -> Result<()> {
        if self.images[0] == self.images[1] || self.captions[0] == self.captions[1] {
            return Err(invalid("quadruple", "the two sides must differ"));
        }
        if self.images[0].height != self.images[1].height || self.captions.iter().any(|c| c.is_empty()) {
            return Err(invalid("quadruple", "malformed images or captions"));
        }
        Ok(())
    }
}

pub fn build_quadruples(specs: &[SceneSpec], size: usize, seed: u64) -> Result<Vec<Quadruple>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let k = mix(&[seed, purpose::EVAL, i as u64]);
            let (_, edited) = random_edit(s, k);
            let template = mix(&[k, 1]);
            let q = Quadruple {
                images: [render(s, size, mix(&[k, 2]))?, render(&edited, size, mix(&[k, 3]))?],
                captions: [caption(s, template), caption(&edited, template)],
            };
            q.validate()?;
            Ok(q)
        })
        .collect()
}

/// `scores[q][i][j]`: similarity of image `i` and caption `j` of quadruple `q`.
pub fn quadruple_scores<T: Real>(
    quads: &[Quadruple],
    image_params: &Params<T>,
    params: &Params<T>,
    cfg: &ModelConfig,
) -> Result<Vec<[[f64; 2]; 2]>> {
    let imgs: Vec<Image> = quads.iter().flat_map(|q| q.images.iter().cloned()).collect();
    let caps: Vec<Vec<u32>> = quads.iter().flat_map(|q| q.captions.iter().cloned()).collect();
    let x = embed_images(image_params, cfg, &imgs)?;
    let y = embed_texts(params, cfg, &caps)?;
    Ok((0..quads.len())
        .map(|q| {
            let s = |i: usize, j: usize| dot(&x[2 * q + i], &y[2 * q + j]);
            [[s(0, 0), s(0, 1)], [s(1, 0), s(1, 1)]]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub n: usize,
    pub text: f64,
    pub image: f64,
    pub group: f64,
    /// Mean of the four pairwise comparisons.
    pub pairwise: f64,
}

/// Winoground scoring. A comparison only counts when strictly correct.
pub fn evaluate_group_score(scores: &[[[f64; 2]; 2]]) -> Result<GroupScore> {
    if scores.is_empty() {
        return Err(invalid("evaluate_group_score", "no quadruples"));
    }
    let (mut t, mut i, mut gr, mut pw) = (0usize, 0usize, 0usize, 0usize);
    for (q, s) in scores.iter().enumerate() {
        if s.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("evaluate_group_score", format!("quadruple {q} has a non-finite score")));
        }
        let text = [s[0][0] > s[0][1], s[1][1] > s[1][0]];
        let image = [s[0][0] > s[1][0], s[1][1] > s[0][1]];
        let ts = text[0] && text[1];
        let is = image[0] && image[1];
        t += ts as usize;
        i += is as usize;
        gr += (ts && is) as usize;
        pw += text.iter().chain(&image).filter(|&&b| b).count();
    }
    let n = scores.len();
    let f = |k: usize| k as f64 / n as f64;
    Ok(GroupScore { n, text: f(t), image: f(i), group: f(gr), pairwise: pw as f64 / (4 * n) as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

pub const PROBE_MAX_ITERS: usize = 2000;
pub const PROBE_TOLERANCE: f64 = 1e-5;

/// Multinomial logistic regression on frozen features by full-batch gradient descent,
/// stopped at gradient norm below 1e-5 or after 2,000 iterations.
pub fn evaluate_linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
) -> Result<ProbeResult> {
    if train_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() || test_x.is_empty() {
        return Err(invalid("evaluate_linear_probe", "need matching, non-empty features and labels"));
    }
    if train_y.iter().chain(test_y).any(|&y| y >= classes) {
        return Err(invalid("evaluate_linear_probe", "label outside the class range"));
    }
    if train_y.iter().all(|&y| y == train_y[0]) {
        return Err(invalid("evaluate_linear_probe", "training set has a single class"));
    }
    let d = train_x[0].len() + 1;
    let feat = |x: &Vec<f64>| x.iter().copied().chain([1.0]).collect::<Vec<f64>>();
    let xs: Vec<Vec<f64>> = train_x.iter().map(feat).collect();
    let mut w = vec![0.0; d * classes];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes).map(|c| (0..d).map(|k| x[k] * w[k * classes + c]).sum()).collect()
    };
    let scale = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
    let lr = 1.0 / scale.max(1e-12);
    let n = xs.len() as f64;
    let (mut iterations, mut grad_norm) = (0, f64::INFINITY);
    // Nesterov-accelerated gradient descent; the loss is smooth with constant ≤ max‖x‖²/2
    let mut prev = w.clone();
    for it in 0..PROBE_MAX_ITERS {
        let momentum = it as f64 / (it as f64 + 3.0);
        let look: Vec<f64> = w.iter().zip(&prev).map(|(a, b)| a + momentum * (a - b)).collect();
        let mut grad = vec![0.0; d * classes];
        for (x, &y) in xs.iter().zip(train_y) {
            let z = logits(&look, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let r = e[c] / s - (c == y) as u8 as f64;
                for k in 0..d {
                    grad[k * classes + c] += r * x[k] / n;
                }
            }
        }
        grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        iterations = it + 1;
        if grad_norm < PROBE_TOLERANCE {
            w = look;
            break;
        }
        prev = std::mem::replace(&mut w, look.iter().zip(&grad).map(|(a, g)| a - lr * g).collect());
    }
    let acc = |xs: &[Vec<f64>], ys: &[usize]| {
        let hits = xs.iter().zip(ys).filter(|(x, &y)| rank_of(&logits(&w, &feat(x)), y) == 0).count();
        hits as f64 / xs.len() as f64
    };
    Ok(ProbeResult { accuracy: acc(test_x, test_y), train_accuracy: acc(train_x, train_y), iterations, grad_norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedPatchMse {
    pub model: f64,
    /// Predicting each masked patch as its own mean value.
    pub patch_mean_baseline: f64,
}

/// Masked-patch error of the reconstruction decoder on `images`, conditioned on the image
/// embedding, against the per-patch-mean predictor on the same masks.
pub fn evaluate_masked_patches<T: Real>(params: &Params<T>, cfg: &ModelConfig, images: &[Image], seed: u64) -> Result<MaskedPatchMse> {
    let (mut model, mut base, mut count) = (0.0, 0.0, 0usize);
    for (c, chunk) in images.chunks(EVAL_BATCH).enumerate() {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let out = encode_image(&mut g, &p, &cfg.vision, chunk)?;
        let m = mae_reconstruct(&mut g, &p, &cfg.vision, &cfg.mae, out.patches, out.embedding, chunk, mix(&[seed, c as u64]))?;
        let targets = patchify_targets::<f64>(chunk, cfg.vision.patch_size, cfg.mae.norm_pix)?;
        let pd = cfg.vision.patch_dim();
        let np = cfg.vision.patches();
        let k: usize = m.masks.iter().map(|mk| mk.iter().filter(|&&b| b).count()).sum();
        model += g.value(m.loss).item().f64() * (k * pd) as f64;
        for (i, mk) in m.masks.iter().enumerate() {
            for (j, _) in mk.iter().enumerate().filter(|(_, &b)| b) {
                let row = &targets.data()[(i * np + j) * pd..(i * np + j + 1) * pd];
                let mean = row.iter().sum::<f64>() / pd as f64;
                base += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
        }
        count += k * pd;
    }
    if count == 0 {
        return Err(invalid("evaluate_masked_patches", "no masked patches"));
    }
    Ok(MaskedPatchMse { model: model / count as f64, patch_mean_baseline: base / count as f64 })
}
