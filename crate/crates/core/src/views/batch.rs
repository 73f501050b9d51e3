use crate::error::{invalid, Result};
use crate::losses::{cross_modal, same_modality, CrossSampleNegatives, Modality, PairWeights, Provenance};

use crate::models::{encode_image, encode_text, encode_views, Bound, ModelConfig, VisionOutput};
use crate::rng::mix;
use crate::scenes::{paraphrase_positive, Image, Paraphraser, Vocab};
use crate::tensor::{Graph, Real, Var};

use super::augment::{multicrop, AugmentPolicy, MultiCrop};
use super::geco::GecoResponse;

/// Where a view came from. Only [`Origin::Geco`] views may be negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Original,
    /// Crop and pixel augmentation.
    Pixel,
    /// Caption re-drawn with another template.
    Template,
    Geco,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageView {
    pub image: Image,
    pub negative: bool,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextView {
    pub tokens: Vec<u32>,
    pub negative: bool,
    pub origin: Origin,
}

/// Every view of one training sample. `texts[0]` is the sample's own caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub source: u64,
    pub seed: u64,
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub geco_images: Vec<ImageView>,
    pub texts: Vec<TextView>,
}

impl ViewSet {
    pub fn validate(&self) -> Result<()> {
        if self.globals.len() < 2 {
            return Err(invalid("view set", format!("sample {} has {} global views", self.source, self.globals.len())));
        }
        let bad_neg = self.geco_images.iter().any(|v| v.negative && v.origin != Origin::Geco)
            || self.texts.iter().any(|v| v.negative && v.origin != Origin::Geco);
        if bad_neg {
            return Err(invalid("view set", "negative view not produced by the generative provider"));
        }
        match self.texts.first() {
            Some(t) if t.origin == Origin::Original && !t.negative => Ok(()),
            _ => Err(invalid("view set", "first text view must be the original caption")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewConfig {
    pub multicrop: MultiCrop,
    pub policy: AugmentPolicy,
    /// Add a re-templated caption as the text-text partner.
    pub text_augment: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self { multicrop: MultiCrop::default(), policy: AugmentPolicy::default(), text_augment: true }
    }
}

/// Builds the views of one sample. GeCo views are included when a response is given.
pub fn build_view_set(
    source: u64,
    image: &Image,
    caption: &[u32],
    cfg: &ViewConfig,
    patch: usize,
    geco: Option<&GecoResponse>,
    seed: u64,
) -> Result<ViewSet> {
    let crops = multicrop(image, &cfg.multicrop, &cfg.policy, patch, seed)?;
    let mut texts = vec![TextView { tokens: caption.to_vec(), negative: false, origin: Origin::Original }];
    if cfg.text_augment {
        let plain = Paraphraser { synonym_rate: 0.0, ..Paraphraser::default() };
        let tokens = paraphrase_positive(caption, mix(&[seed, 3]), &plain)?;
        texts.push(TextView { tokens, negative: false, origin: Origin::Template });
    }
    let mut geco_images = Vec::new();
    if let Some(r) = geco {
        if let Some(p) = &r.positive_image {
            geco_images.push(ImageView { image: p.value.clone(), negative: false, origin: Origin::Geco });
        }
        if let Some(n) = &r.negative_image {
            geco_images.push(ImageView { image: n.value.clone(), negative: true, origin: Origin::Geco });
        }
        if let Some(p) = &r.positive_caption {
            texts.push(TextView { tokens: p.value.clone(), negative: false, origin: Origin::Geco });
        }
        if let Some(n) = &r.negative_caption {
            texts.push(TextView { tokens: n.value.clone(), negative: true, origin: Origin::Geco });
        }
    }
    let vs = ViewSet { source, seed, globals: crops.globals, locals: crops.locals, geco_images, texts };
    vs.validate()?;
    Ok(vs)
}

/// Which embeddings feed which loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Routing {
    pub image_image: bool,
    pub text_text: bool,
    /// Student local views also enter the image-text loss.
    pub locals_in_image_text: bool,
    /// Image rows of the image-text loss come from the teacher (true) or the student.
    pub teacher_image_text: bool,
    pub cross_sample_negatives: CrossSampleNegatives,
}

impl Default for Routing {
    fn default() -> Self {
        Self {
            image_image: true,
            text_text: true,
            locals_in_image_text: false,
            teacher_image_text: true,
            cross_sample_negatives: CrossSampleNegatives::Mask,
        }
    }
}

/// Row/column embeddings and weights of one pairwise loss.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub rows: Var,
    pub cols: Var,
    pub weights: PairWeights,
    pub row_provenance: Provenance,
    pub col_provenance: Provenance,
    pub row_origin: Vec<Origin>,
    pub col_origin: Vec<Origin>,
}

#[derive(Debug, Clone)]
pub struct EmbeddedBatch {
    pub image_text: LossInputs,
    pub image_image: Option<LossInputs>,
    pub text_text: Option<LossInputs>,
    /// Student encoding of global view 0 of every sample (reconstruction input).
    pub student_image: VisionOutput,
    pub student_images: Vec<Image>,
    /// Student embeddings of the original captions.
    pub student_text: Var,
    pub captions: Vec<Vec<u32>>,
    /// Resolution of every teacher forward pass.
    pub teacher_input_sizes: Vec<usize>,
}

struct Side {
    prov: Provenance,
    origin: Vec<Origin>,
}

impl Side {
    fn new(m: Modality) -> Self {
        Self { prov: Provenance { modality: m, negative: vec![], source: vec![] }, origin: vec![] }
    }

    fn push(&mut self, source: u64, negative: bool, origin: Origin) {
        self.prov.source.push(source);
        self.prov.negative.push(negative);
        self.origin.push(origin);
    }
}

/// Embeds every view and pairs them up for the three contrastive losses. The teacher is
/// bound as constants, so no gradient reaches it, and only sees full-resolution views.
pub fn assemble_contrastive_batch<T: Real>(
    g: &mut Graph<T>,
    sets: &[ViewSet],
    student: &Bound,
    teacher: &Bound,
    cfg: &ModelConfig,
    routing: &Routing,
) -> Result<EmbeddedBatch> {
    if sets.is_empty() {
        return Err(invalid("assemble_contrastive_batch", "empty batch"));
    }
    for s in sets {
        s.validate()?;
    }
    let n_global = sets[0].globals.len();
    if sets.iter().any(|s| s.globals.len() != n_global || s.locals.len() != sets[0].locals.len()) {
        return Err(invalid("assemble_contrastive_batch", "samples disagree on the number of views"));
    }
    let b = sets.len();
    let vocab = Vocab::shared();
    let ctx = cfg.text.context;

    // Student full-resolution batch: globals (view-major), then GeCo images.
    let mut full: Vec<Image> = Vec::new();
    let mut full_side = Side::new(Modality::Image);
    for k in 0..n_global {
        for s in sets {
            full.push(s.globals[k].clone());
            full_side.push(s.source, false, if k == 0 { Origin::Original } else { Origin::Pixel });
        }
    }
    for s in sets {
        for v in &s.geco_images {
            full.push(v.image.clone());
            full_side.push(s.source, v.negative, v.origin);
        }
    }
    let student_full = encode_image(g, student, &cfg.vision, &full)?;
    let first: Vec<usize> = (0..b).collect();
    let student_image = VisionOutput {
        embedding: g.gather_rows(student_full.embedding, &first)?,
        patches: g.gather_rows(student_full.patches, &first)?,
        pool_attention: g.gather_rows(student_full.pool_attention, &first)?,
    };
    let mut local_side = Side::new(Modality::Image);
    let student_local = if sets[0].locals.is_empty() {
        None
    } else {
        let locals: Vec<Image> = sets.iter().flat_map(|s| s.locals.iter().cloned()).collect();
        for s in sets {
            for _ in &s.locals {
                local_side.push(s.source, false, Origin::Pixel);
            }
        }
        Some(encode_views(g, student, &cfg.vision, &locals)?.embedding)
    };

    // Teacher: globals, plus GeCo images when they are image-text rows.
    let mut teacher_images: Vec<Image> = full[..b * n_global].to_vec();
    if routing.teacher_image_text {
        teacher_images.extend(full[b * n_global..].iter().cloned());
    }
    let teacher_input_sizes: Vec<usize> = teacher_images.iter().map(|i| i.height).collect();
    let teacher_out = encode_image(g, teacher, &cfg.vision, &teacher_images)?.embedding;

    // Texts: originals first, then every other view, sample-major.
    let mut texts: Vec<Vec<u32>> = sets.iter().map(|s| vocab.encoder_input(&s.texts[0].tokens, ctx)).collect();
    let mut orig_side = Side::new(Modality::Text);
    sets.iter().for_each(|s| orig_side.push(s.source, false, Origin::Original));
    let mut aug_side = Side::new(Modality::Text);
    for s in sets {
        for t in &s.texts[1..] {
            texts.push(vocab.encoder_input(&t.tokens, ctx));
            aug_side.push(s.source, t.negative, t.origin);
        }
    }
    let text_all = encode_text(g, student, &cfg.text, &texts)?;
    let student_text = g.gather_rows(text_all, &first)?;

    // Image-text: global view 0 and GeCo images against originals and GeCo captions.
    let geco_rows: Vec<usize> = (b * n_global..full.len()).collect();
    let mut it_rows_idx: Vec<usize> = first.clone();
    it_rows_idx.extend(&geco_rows);
    let mut it_row_side = Side::new(Modality::Image);
    for &i in &it_rows_idx {
        it_row_side.push(full_side.prov.source[i], full_side.prov.negative[i], full_side.origin[i]);
    }
    let it_source = if routing.teacher_image_text {
        // teacher rows are [globals..., geco...] in the same order as `full`
        teacher_out
    } else {
        student_full.embedding
    };
    let mut it_rows = g.gather_rows(it_source, &it_rows_idx)?;
    if routing.locals_in_image_text {
        if let Some(l) = student_local {
            it_rows = g.concat(&[it_rows, l], 0)?;
            for i in 0..local_side.origin.len() {
                it_row_side.push(local_side.prov.source[i], false, Origin::Pixel);
            }
        }
    }
    let mut it_col_idx: Vec<usize> = first.clone();
    let mut it_col_side = Side::new(Modality::Text);
    sets.iter().for_each(|s| it_col_side.push(s.source, false, Origin::Original));
    for (k, i) in (b..texts.len()).enumerate() {
        if aug_side.origin[k] == Origin::Geco {
            it_col_idx.push(i);
            it_col_side.push(aug_side.prov.source[k], aug_side.prov.negative[k], Origin::Geco);
        }
    }
    let it_cols = g.gather_rows(text_all, &it_col_idx)?;
    let image_text = LossInputs {
        rows: it_rows,
        cols: it_cols,
        weights: cross_modal(&it_row_side.prov, &it_col_side.prov, routing.cross_sample_negatives)?,
        row_provenance: it_row_side.prov,
        col_provenance: it_col_side.prov,
        row_origin: it_row_side.origin,
        col_origin: it_col_side.origin,
    };

    // Image-image: every student view against the teacher's global views.
    let image_image = if routing.image_image {
        let mut rows = student_full.embedding;
        let mut row_side = full_side;
        if let Some(l) = student_local {
            rows = g.concat(&[rows, l], 0)?;
            row_side.prov.extend(&local_side.prov);
            row_side.origin.extend(local_side.origin);
        }
        let cols = g.gather_rows(teacher_out, &(0..b * n_global).collect::<Vec<_>>())?;
        let mut col_side = Side::new(Modality::Image);
        for k in 0..n_global {
            sets.iter().for_each(|s| col_side.push(s.source, false, if k == 0 { Origin::Original } else { Origin::Pixel }));
        }
        Some(LossInputs {
            rows,
            cols,
            weights: same_modality(&row_side.prov, &col_side.prov)?,
            row_provenance: row_side.prov,
            col_provenance: col_side.prov,
            row_origin: row_side.origin,
            col_origin: col_side.origin,
        })
    } else {
        None
    };

    // Text-text: originals against every other caption view, weights tied.
    let text_text = if routing.text_text && texts.len() > b {
        let cols = g.gather_rows(text_all, &(b..texts.len()).collect::<Vec<_>>())?;
        Some(LossInputs {
            rows: student_text,
            cols,
            weights: same_modality(&orig_side.prov, &aug_side.prov)?,
            row_provenance: orig_side.prov,
            col_provenance: aug_side.prov,
            row_origin: orig_side.origin,
            col_origin: aug_side.origin,
        })
    } else {
        None
    };

    Ok(EmbeddedBatch {
        image_text,
        image_image,
        text_text,
        student_image,
        student_images: sets.iter().map(|s| s.globals[0].clone()).collect(),
        student_text,
        captions: sets.iter().map(|s| s.texts[0].tokens.clone()).collect(),
        teacher_input_sizes,
    })
}
