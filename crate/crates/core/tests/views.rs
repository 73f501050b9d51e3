mod oracles;

use oracles::{ema_recurrence, Lcg};
use proptest::prelude::*;
use tulip_core::losses::{siglip_loss, CrossSampleNegatives, LossScalars, PairWeights, ScalarVars};
use tulip_core::models::{encode_image, encode_text, ModelConfig, Params, Pool, TextConfig, VisionConfig};
use tulip_core::scenes::{
    caption, parse_caption, render, sample_scene, semantic_edit, Color, EditKind, EditOp, Group, Image, SceneSpec,
    Shape, Vocab,
};
use tulip_core::views::*;
use tulip_core::{Error, Graph, Tensor};

fn scene_image(seed: u64, size: usize) -> Image {
    render(&sample_scene(seed), size, seed).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        vision: VisionConfig { image_size: 32, patch_size: 8, width: 16, depth: 1, heads: 2, embed_dim: 8, pool: Pool::AttentionMap, mlp_ratio: 2 },
        text: TextConfig { width: 16, depth: 1, heads: 2, embed_dim: 8, mlp_ratio: 2, ..TextConfig::default() },
        ..ModelConfig::default()
    }
}

fn sample(id: u64, size: usize) -> (Image, Vec<u32>) {
    let spec = sample_scene(id);
    (render(&spec, size, id).unwrap(), caption(&spec, id))
}

fn plain_views(n_local: usize) -> ViewConfig {
    ViewConfig {
        multicrop: MultiCrop { n_global: 2, n_local, global_scale: (1.0, 1.0), local_scale: (0.1, 0.3), local_size: 16 },
        policy: AugmentPolicy::identity(),
        text_augment: false,
    }
}

#[test]
fn identity_policy_returns_input() {
    let img = scene_image(3, 32);
    assert_eq!(pixel_augment(&img, &AugmentPolicy::identity(), 9).unwrap(), img);
}

#[test]
fn augment_is_deterministic_and_stays_in_range() {
    let img = scene_image(5, 32);
    let policy = AugmentPolicy {
        crop_scale: Some((0.2, 1.0)),
        hflip: true,
        jitter: Some(ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4 }),
        blur: Some((0.1, 1.5)),
    };
    assert_eq!(pixel_augment(&img, &policy, 11).unwrap(), pixel_augment(&img, &policy, 11).unwrap());
    assert_ne!(pixel_augment(&img, &policy, 11).unwrap(), pixel_augment(&img, &policy, 12).unwrap());
    for seed in 0..1000 {
        let out = pixel_augment(&img, &policy, seed).unwrap();
        assert_eq!((out.height, out.width), (32, 32));
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)), "seed {seed}");
    }
}

#[test]
fn bad_crop_scale_is_rejected() {
    let img = scene_image(0, 32);
    for s in [(0.0, 0.5), (0.5, 1.2), (0.8, 0.4)] {
        let p = AugmentPolicy { crop_scale: Some(s), ..AugmentPolicy::identity() };
        assert!(matches!(pixel_augment(&img, &p, 0), Err(Error::Invalid { .. })), "{s:?}");
    }
}

#[test]
fn multicrop_counts_and_contracts() {
    let img = scene_image(1, 32);
    let mc = MultiCrop { n_local: 0, ..MultiCrop::default() };
    let v = multicrop(&img, &mc, &AugmentPolicy::default(), 8, 4).unwrap();
    assert_eq!((v.globals.len(), v.locals.len()), (2, 0));
    let v = multicrop(&img, &MultiCrop { n_local: 3, ..mc.clone() }, &AugmentPolicy::default(), 8, 4).unwrap();
    assert_eq!((v.globals.len(), v.locals.len()), (2, 3));
    assert!(v.locals.iter().all(|l| l.height == 16 && l.width == 16));
    assert!(v.globals.iter().all(|l| l.height == 32));
    assert!(multicrop(&img, &MultiCrop { n_global: 1, ..mc.clone() }, &AugmentPolicy::identity(), 8, 0).is_err());
    assert!(multicrop(&img, &MultiCrop { local_size: 12, n_local: 1, ..mc }, &AugmentPolicy::identity(), 8, 0).is_err());
}

#[test]
fn full_scale_globals_are_the_augmented_image() {
    let img = scene_image(2, 32);
    let mc = MultiCrop { n_local: 0, global_scale: (1.0, 1.0), ..MultiCrop::default() };
    let v = multicrop(&img, &mc, &AugmentPolicy::identity(), 8, 17).unwrap();
    assert!(v.globals.iter().all(|g| *g == img));
    assert!(v.global_boxes.iter().all(|b| *b == CropBox::full(32)));
}

#[test]
fn local_crop_area_stays_in_range() {
    let img = scene_image(4, 32);
    let mc = MultiCrop::default();
    for seed in 0..1000 {
        let v = multicrop(&img, &mc, &AugmentPolicy::identity(), 8, seed).unwrap();
        for b in v.local_boxes.iter().chain(&v.global_boxes) {
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 32.0 + 1e-9 && b.y + b.h <= 32.0 + 1e-9);
        }
        for b in &v.local_boxes {
            let f = b.area_fraction(32);
            assert!(f >= mc.local_scale.0 - 1e-12 && f <= mc.local_scale.1 + 1e-12, "seed {seed}: {f}");
        }
    }
}

fn random_params(seed: u64, shapes: &[(&str, Vec<usize>)]) -> Params<f64> {
    let mut r = Lcg(seed);
    let mut p = Params::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        p.insert(*name, Tensor::new(shape.clone(), (0..n).map(|_| r.uniform(-2.0, 2.0)).collect()).unwrap());
    }
    p
}

fn shapes() -> Vec<(&'static str, Vec<usize>)> {
    vec![("vision.a", vec![3, 4]), ("vision.b", vec![5]), ("vision.c", vec![2, 2, 2])]
}

#[test]
fn ema_with_zero_momentum_copies_student() {
    let student = random_params(1, &shapes());
    let mut teacher = TeacherState { params: random_params(2, &shapes()) };
    ema_update(&mut teacher, &student, 0.0).unwrap();
    assert_eq!(teacher.params, student);
    let before = teacher.clone();
    ema_update(&mut teacher, &random_params(3, &shapes()), 1.0).unwrap();
    assert_eq!(teacher, before);
}

#[test]
fn ema_matches_closed_form() {
    let student = random_params(4, &shapes());
    let t0 = random_params(5, &shapes());
    let m = 0.9;
    for k in [1usize, 10, 100] {
        let mut teacher = TeacherState { params: t0.clone() };
        for _ in 0..k {
            ema_update(&mut teacher, &student, m).unwrap();
        }
        let mk = m.powi(k as i32);
        for (name, t) in teacher.params.iter() {
            let (a, s) = (t0.get(name).unwrap().data(), student.get(name).unwrap().data());
            for (i, &v) in t.data().iter().enumerate() {
                assert!((v - (mk * a[i] + (1.0 - mk) * s[i])).abs() < 1e-12, "k={k}");
            }
        }
    }
}

#[test]
fn ema_rejects_mismatched_shapes_and_bad_momentum() {
    let student = random_params(6, &[("vision.a", vec![4, 3])]);
    let mut teacher = TeacherState { params: random_params(7, &[("vision.a", vec![3, 4])]) };
    assert!(matches!(ema_update(&mut teacher, &student, 0.5), Err(Error::Invalid { .. })));
    assert!(ema_update(&mut teacher, &student, 1.5).is_err());
    let missing = random_params(8, &[("vision.z", vec![3, 4])]);
    assert!(ema_update(&mut teacher, &missing, 0.5).is_err());
}

#[test]
fn ema_schedule_ramps_from_start_to_end() {
    let s = EmaSchedule::default();
    assert!((s.momentum(0, 100) - 0.992).abs() < 1e-15);
    assert!((s.momentum(99, 100) - 1.0).abs() < 1e-15);
    let mut prev = 0.0;
    for k in 0..100 {
        let m = s.momentum(k, 100);
        assert!(m >= prev);
        prev = m;
    }
    assert_eq!(EmaSchedule::Constant(0.99).momentum(7, 10), 0.99);
}

proptest! {
    #[test]
    fn ema_follows_the_recurrence(seed in 0u64..10_000, m in 0.0f64..1.0, k in 1usize..20) {
        let shape = [("vision.w", vec![6])];
        let t0 = random_params(seed, &shape);
        let mut teacher = TeacherState { params: t0.clone() };
        let mut r = Lcg(seed ^ 0xABCD);
        let mut expect = t0.get("vision.w").unwrap().data().to_vec();
        for _ in 0..k {
            let student = random_params(r.below(1 << 30), &shape);
            ema_update(&mut teacher, &student, m).unwrap();
            expect = ema_recurrence(&expect, student.get("vision.w").unwrap().data(), m, 1);
        }
        let got = teacher.params.get("vision.w").unwrap().data();
        let diff = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12);
    }

    #[test]
    fn ema_is_linear(seed in 0u64..10_000, m in 0.0f64..1.0, a in -3.0f64..3.0) {
        let shape = [("vision.w", vec![4])];
        let (t, s) = (random_params(seed, &shape), random_params(seed + 1, &shape));
        let scaled = |p: &Params<f64>| {
            let mut q = p.clone();
            q.get_mut("vision.w").unwrap().data_mut().iter_mut().for_each(|v| *v *= a);
            q
        };
        let mut base = TeacherState { params: t.clone() };
        ema_update(&mut base, &s, m).unwrap();
        let mut sc = TeacherState { params: scaled(&t) };
        ema_update(&mut sc, &scaled(&s), m).unwrap();
        let (x, y) = (base.params.get("vision.w").unwrap().data(), sc.params.get("vision.w").unwrap().data());
        for (p, q) in x.iter().zip(y) {
            prop_assert!((p * a - q).abs() < 1e-12);
        }
    }
}

#[test]
fn count_edit_turns_three_into_two() {
    let spec = SceneSpec::single(Group { shape: Shape::Circle, color: Color::Red, count: 3, cell: 0 });
    let vocab = Vocab::shared();
    let original = caption(&spec, 0);
    assert!(vocab.to_text(&original).unwrap().contains("three red circles"));
    let edited = semantic_edit(&spec, EditOp { kind: EditKind::Count, target: 0, value: 2 }).unwrap();
    let neg = caption(&edited, 0);
    assert!(vocab.to_text(&neg).unwrap().contains("two red circles"));

    let provider = SyntheticProvider::default();
    let req = GecoRequest { sample_id: 0, image: render(&spec, 32, 0).unwrap(), caption: original.clone(), seed: 3 };
    let resp = geco_augment(&req, &provider).unwrap();
    let pos = resp.positive_caption.unwrap();
    assert_eq!(parse_caption(&pos.value), Some(spec.clone()));
    let negative = resp.negative_caption.unwrap();
    assert_ne!(parse_caption(&negative.value), Some(spec));
    assert!(!negative.edit.is_empty());
}

#[test]
fn synthetic_negatives_never_keep_the_original_meaning() {
    let provider = SyntheticProvider::default();
    for id in 0..500 {
        let (image, cap) = sample(id, 32);
        let spec = parse_caption(&cap).unwrap();
        let req = GecoRequest { sample_id: id, image: image.clone(), caption: cap, seed: id * 7 };
        let r = geco_augment(&req, &provider).unwrap();
        let neg = parse_caption(&r.negative_caption.unwrap().value).unwrap();
        assert_ne!(neg, spec, "sample {id}");
        assert_eq!(parse_caption(&r.positive_caption.unwrap().value), Some(spec));
        assert_ne!(r.negative_image.unwrap().value, image);
        assert_eq!(r.positive_image.unwrap().value.height, 32);
    }
}

/// Provider whose negative is the unmodified original.
struct Lazy;

impl GecoProvider for Lazy {
    fn name(&self) -> &str {
        "lazy"
    }

    fn generate(&self, req: &GecoRequest) -> tulip_core::Result<GecoResponse> {
        Ok(GecoResponse {
            negative_caption: Some(Tagged { value: req.caption.clone(), edit: "none".into() }),
            ..GecoResponse::default()
        })
    }
}

#[test]
fn original_marked_negative_is_a_provider_error() {
    let (image, cap) = sample(1, 32);
    let req = GecoRequest { sample_id: 1, image, caption: cap, seed: 0 };
    assert!(matches!(geco_augment(&req, &Lazy), Err(Error::Provider(_))));
    let mut cache = GecoCache::default();
    assert!(cache.get_or_generate(0, &req, &Lazy).is_none());
    assert_eq!(cache.len(), 1);
    assert!(cache.get_or_generate(1, &req, &SyntheticProvider::default()).is_some());
}

fn stub(reply: &str) -> ExternalProvider {
    let script = format!("while read -r line; do printf '%s\\n' '{reply}'; done");
    ExternalProvider::spawn("sh", &["-c".to_string(), script]).unwrap()
}

#[test]
fn external_provider_round_trips_json_lines() {
    let spec = SceneSpec::single(Group { shape: Shape::Square, color: Color::Blue, count: 3, cell: 1 });
    let vocab = Vocab::shared();
    let edited = semantic_edit(&spec, EditOp { kind: EditKind::Count, target: 0, value: 2 }).unwrap();
    let neg_text = vocab.to_text(&caption(&edited, 0)).unwrap();
    let provider = stub(&format!(r#"{{"negative_caption":{{"value":"{neg_text}","edit":"count"}}}}"#));
    let req = GecoRequest { sample_id: 9, image: render(&spec, 32, 1).unwrap(), caption: caption(&spec, 0), seed: 1 };
    for _ in 0..3 {
        let r = geco_augment(&req, &provider).unwrap();
        assert_eq!(parse_caption(&r.negative_caption.unwrap().value), Some(edited.clone()));
        assert!(r.positive_image.is_none());
    }

    let failing = stub(r#"{"error":"editor unavailable"}"#);
    match geco_augment(&req, &failing) {
        Err(Error::Provider(m)) => assert!(m.contains("editor unavailable")),
        other => panic!("{other:?}"),
    }
    let garbage = stub("not json");
    assert!(matches!(geco_augment(&req, &garbage), Err(Error::Provider(_))));
}

fn view_sets(n: u64, cfg: &ViewConfig, geco: bool) -> Vec<ViewSet> {
    let provider = SyntheticProvider::default();
    (0..n)
        .map(|id| {
            let (image, cap) = sample(id, 32);
            let resp = geco.then(|| {
                let req = GecoRequest { sample_id: id, image: image.clone(), caption: cap.clone(), seed: id };
                let mut r = geco_augment(&req, &provider).unwrap();
                r.positive_image = None;
                r.positive_caption = None;
                r
            });
            build_view_set(id, &image, &cap, cfg, 8, resp.as_ref(), 100 + id).unwrap()
        })
        .collect()
}

#[test]
fn view_sets_are_deterministic_and_valid() {
    let cfg = ViewConfig::default();
    let a = view_sets(3, &cfg, true);
    assert_eq!(a, view_sets(3, &cfg, true));
    for s in &a {
        assert_eq!(s.texts[0].origin, Origin::Original);
        assert_eq!(s.texts[1].origin, Origin::Template);
        assert_eq!(parse_caption(&s.texts[1].tokens), parse_caption(&s.texts[0].tokens));
    }
    let mut broken = a[0].clone();
    broken.globals.truncate(1);
    assert!(broken.validate().is_err());
    let mut forged = a[0].clone();
    forged.texts[1].negative = true;
    assert!(forged.validate().is_err());
}

/// Hand enumeration for 2 samples, 2 global views each and 1 GeCo negative image each.
/// Rows: g0(s0) g0(s1) g1(s0) g1(s1) neg(s0) neg(s1); columns: teacher g0(s0) g0(s1) g1(s0) g1(s1).
#[test]
fn image_image_weights_match_hand_enumeration() {
    let cfg = small();
    let params = cfg.init::<f64>(1).unwrap();
    let mut provider = plain_views(0);
    provider.text_augment = true;
    let provider_sets = view_sets(2, &provider, true);
    let sets: Vec<ViewSet> = provider_sets
        .into_iter()
        .map(|mut s| {
            s.texts.retain(|t| !t.negative);
            s
        })
        .collect();
    let mut g = Graph::new();
    let student = params.bind(&mut g, true);
    let teacher = TeacherState::from_student(&params).params.bind(&mut g, false);
    let batch = assemble_contrastive_batch(&mut g, &sets, &student, &teacher, &cfg, &Routing::default()).unwrap();
    let ii = batch.image_image.unwrap();
    #[rustfmt::skip]
    let expected: Vec<i8> = vec![
         1, -1,  1, -1,
        -1,  1, -1,  1,
         1, -1,  1, -1,
        -1,  1, -1,  1,
        -1, -1, -1, -1,
        -1, -1, -1, -1,
    ];
    assert_eq!((ii.weights.rows(), ii.weights.cols()), (6, 4));
    assert_eq!(ii.weights.entries(), &expected[..]);
    assert_eq!(g.shape(ii.rows), &[6, 8]);

    // image-text: rows g0(s0) g0(s1) neg(s0) neg(s1); columns are the two original captions
    let it = &batch.image_text;
    assert_eq!(it.weights.entries(), &[1, -1, -1, 1, -1, 0, 0, -1][..]);
    // text-text: originals against the template captions
    let tt = batch.text_text.unwrap();
    assert_eq!(tt.weights.entries(), &[1, -1, -1, 1][..]);
    assert!(batch.teacher_input_sizes.iter().all(|&s| s == 32));
}

#[test]
fn teacher_receives_no_gradient() {
    let cfg = small();
    let params = cfg.init::<f64>(2).unwrap();
    let vc = ViewConfig::default();
    let sets = view_sets(2, &vc, true);
    let mut g = Graph::new();
    let student = params.bind(&mut g, true);
    let teacher = TeacherState::from_student(&params).params.bind(&mut g, false);
    let batch = assemble_contrastive_batch(&mut g, &sets, &student, &teacher, &cfg, &Routing::default()).unwrap();
    assert_eq!(batch.teacher_input_sizes.len(), 2 * 2 + 2);
    assert!(batch.teacher_input_sizes.iter().all(|&s| s == cfg.vision.image_size));
    let s = ScalarVars::leaves(&mut g, LossScalars::default());
    let it = &batch.image_text;
    let ii = batch.image_image.as_ref().unwrap();
    let tt = batch.text_text.as_ref().unwrap();
    let l1 = siglip_loss(&mut g, it.rows, it.cols, s, &it.weights).unwrap();
    let l2 = siglip_loss(&mut g, ii.rows, ii.cols, s, &ii.weights).unwrap();
    let l3 = siglip_loss(&mut g, tt.rows, tt.cols, s, &tt.weights).unwrap();
    let a = g.add(l1, l2).unwrap();
    let total = g.add(a, l3).unwrap();
    let grads = g.backward(total).unwrap();
    for (name, &v) in teacher.iter() {
        assert!(grads.get(v).unwrap().is_none(), "{name}");
    }
    let sg = student.gradients(&grads).unwrap();
    assert!(sg.get("vision.patch.w").unwrap().norm() > 0.0);
    assert!(sg.get("text.tokens").unwrap().norm() > 0.0);
}

#[test]
fn degenerate_configuration_is_plain_siglip() {
    let cfg = small();
    let params = cfg.init::<f64>(3).unwrap();
    let sets = view_sets(4, &plain_views(0), false);
    let routing = Routing { image_image: false, text_text: false, ..Routing::default() };
    let mut g = Graph::new();
    let student = params.bind(&mut g, true);
    let teacher = TeacherState::from_student(&params).params.bind(&mut g, false);
    let batch = assemble_contrastive_batch(&mut g, &sets, &student, &teacher, &cfg, &routing).unwrap();
    assert!(batch.image_image.is_none() && batch.text_text.is_none());
    assert_eq!(batch.image_text.weights, PairWeights::standard(4));
    let s = ScalarVars::constants(&mut g, LossScalars::default());
    let it = &batch.image_text;
    let loss = siglip_loss(&mut g, it.rows, it.cols, s, &it.weights).unwrap();
    let got = g.value(loss).item();

    let mut r = Graph::new();
    let p = params.bind(&mut r, false);
    let (images, caps): (Vec<Image>, Vec<Vec<u32>>) = (0..4).map(|id| sample(id, 32)).unzip();
    let vocab = Vocab::shared();
    let toks: Vec<Vec<u32>> = caps.iter().map(|c| vocab.encoder_input(c, cfg.text.context)).collect();
    let x = encode_image(&mut r, &p, &cfg.vision, &images).unwrap().embedding;
    let y = encode_text(&mut r, &p, &cfg.text, &toks).unwrap();
    let s = ScalarVars::constants(&mut r, LossScalars::default());
    let reference = siglip_loss(&mut r, x, y, s, &PairWeights::standard(4)).unwrap();
    let want = r.value(reference).item();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn locals_route_only_where_configured() {
    let cfg = small();
    let params = cfg.init::<f64>(4).unwrap();
    let sets = view_sets(2, &plain_views(2), false);
    let mut g = Graph::new();
    let student = params.bind(&mut g, true);
    let teacher = TeacherState::from_student(&params).params.bind(&mut g, false);
    let b = assemble_contrastive_batch(&mut g, &sets, &student, &teacher, &cfg, &Routing::default()).unwrap();
    assert_eq!(b.image_image.as_ref().unwrap().weights.rows(), 4 + 4);
    assert_eq!(b.image_text.weights.rows(), 2);
    assert!(b.teacher_input_sizes.iter().all(|&s| s == 32));
    let routing = Routing { locals_in_image_text: true, teacher_image_text: false, ..Routing::default() };
    let b = assemble_contrastive_batch(&mut g, &sets, &student, &teacher, &cfg, &routing).unwrap();
    assert_eq!(b.image_text.weights.rows(), 2 + 4);
    assert_eq!(&b.image_text.row_provenance.source, &[0, 1, 0, 0, 1, 1]);
}

#[test]
fn negatives_trace_back_to_the_provider() {
    let cfg = small();
    let params = cfg.init::<f64>(5).unwrap();
    for seed in 0..5u64 {
        let n = 1 + seed % 3;
        let mut sets = view_sets(n, &ViewConfig::default(), true);
        if seed % 2 == 0 {
            sets[0].geco_images.clear();
        }
        let mut g = Graph::new();
        let student = params.bind(&mut g, true);
        let teacher = TeacherState::from_student(&params).params.bind(&mut g, false);
        let routing = Routing { locals_in_image_text: seed % 2 == 1, cross_sample_negatives: CrossSampleNegatives::Negative, ..Routing::default() };
        let b = assemble_contrastive_batch(&mut g, &sets, &student, &teacher, &cfg, &routing).unwrap();
        let mut sides = vec![
            (&b.image_text.row_provenance, &b.image_text.row_origin),
            (&b.image_text.col_provenance, &b.image_text.col_origin),
        ];
        for l in [b.image_image.as_ref(), b.text_text.as_ref()].into_iter().flatten() {
            sides.push((&l.row_provenance, &l.row_origin));
            sides.push((&l.col_provenance, &l.col_origin));
        }
        let mut negatives = 0;
        for (prov, origin) in sides {
            assert_eq!(prov.len(), origin.len());
            for (i, &neg) in prov.negative.iter().enumerate() {
                if neg {
                    negatives += 1;
                    assert_eq!(origin[i], Origin::Geco);
                    assert!(prov.source[i] < n);
                }
            }
        }
        assert!(negatives > 0);
    }
}

#[test]
fn empty_batch_is_rejected() {
    let cfg = small();
    let params = cfg.init::<f64>(6).unwrap();
    let mut g = Graph::new();
    let student = params.bind(&mut g, true);
    let teacher = params.bind(&mut g, false);
    assert!(assemble_contrastive_batch(&mut g, &[], &student, &teacher, &cfg, &Routing::default()).is_err());
}
