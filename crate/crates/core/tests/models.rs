use tulip_core::models::*;
use tulip_core::scenes::{render, sample_scene, Image, PAD};
use tulip_core::tensor::gradcheck::{finite_difference_check, FdOptions};
use tulip_core::tensor::{Graph, Tensor};
use tulip_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        vision: VisionConfig { image_size: 16, patch_size: 8, width: 8, depth: 1, heads: 2, embed_dim: 6, pool: Pool::AttentionMap, mlp_ratio: 2 },
        text: TextConfig { context: 6, vocab_size: 10, width: 8, depth: 1, heads: 2, embed_dim: 6, pool_index: 5, mlp_ratio: 2 },
        mae: MaeConfig { mask_ratio: 0.5, width: 8, depth: 1, heads: 2, norm_pix: true },
        text_decoder: TextDecoderConfig { width: 8, depth: 1, heads: 2 },
    }
}

fn noise_image(size: usize, seed: u64) -> Image {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..size * size * 3)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect();
    Image { height: size, width: size, data }
}

/// Perturbs every parameter so zero-initialized tensors (biases, the decoder head) carry
/// gradient signal in the checks below.
fn jittered(cfg: &ModelConfig, seed: u64) -> Params<f64> {
    let mut p = cfg.init::<f64>(seed).unwrap();
    let mut k = 0u64;
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            k += 1;
            *v += 0.05 * (((k * 2654435761) % 1000) as f64 / 500.0 - 1.0);
        }
    }
    p
}

fn fd() -> FdOptions {
    FdOptions { step: 1e-5, tolerance: 1e-5, max_coords: None }
}

#[test]
fn default_config_embeddings_are_unit_norm() {
    let cfg = ModelConfig::default();
    let params = cfg.init::<f32>(1).unwrap();
    let images: Vec<Image> = (0..3).map(|i| render(&sample_scene(i), cfg.vision.image_size, i).unwrap()).collect();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = encode_image(&mut g, &p, &cfg.vision, &images).unwrap();
    let e = g.value(out.embedding);
    assert_eq!(e.shape(), &[3, cfg.vision.embed_dim]);
    for row in e.data().chunks(cfg.vision.embed_dim) {
        let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "{n}");
    }
    let toks = vec![vec![PAD; cfg.text.context]; 2];
    let t = encode_text(&mut g, &p, &cfg.text, &toks).unwrap();
    assert!(g.value(t).is_finite());
    for row in g.value(t).data().chunks(cfg.text.embed_dim) {
        let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let cfg = tiny();
    let params = cfg.init::<f64>(3).unwrap();
    let run = || {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let img = encode_image(&mut g, &p, &cfg.vision, &[noise_image(16, 1)]).unwrap();
        let txt = encode_text(&mut g, &p, &cfg.text, &[vec![4, 5, 2, 0, 0, 0]]).unwrap();
        (g.value(img.embedding).clone(), g.value(txt).clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
    // Fresh init with the same seed is bitwise identical too.
    assert_eq!(cfg.init::<f64>(3).unwrap(), params);
}

#[test]
fn contract_errors() {
    let cfg = tiny();
    let params = cfg.init::<f64>(0).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    assert!(encode_image(&mut g, &p, &cfg.vision, &[noise_image(24, 0)]).is_err());
    assert!(encode_text(&mut g, &p, &cfg.text, &[vec![10, 0, 0, 0, 0, 0]]).is_err());
    assert!(encode_text(&mut g, &p, &cfg.text, &[vec![1, 2]]).is_err());
    let mut bad = tiny();
    bad.vision.patch_size = 5;
    assert!(bad.validate().is_err());
    bad = tiny();
    bad.vision.heads = 3;
    assert!(bad.validate().is_err());
    bad = tiny();
    bad.text.pool_index = 6;
    assert!(bad.validate().is_err());
    bad = tiny();
    bad.mae.mask_ratio = 1.0;
    assert!(bad.validate().is_err());
    assert!(patch_mask(4, 0.9, 0).is_err());
}

#[test]
fn image_gradient_matches_finite_differences() {
    for pool in [Pool::AttentionMap, Pool::ClassToken] {
        let mut cfg = tiny();
        cfg.vision.pool = pool;
        let params = jittered(&cfg, 5);
        let pixels = patchify::<f64>(&[noise_image(16, 2), noise_image(16, 3)], 8).unwrap();
        let rep = finite_difference_check(
            |g: &mut Graph<f64>, v| {
                let p = params.bind(g, false);
                let out = encode_patches(g, &p, &cfg.vision, v[0])?;
                Ok::<_, Error>(g.mean_all(out.embedding)?)
            },
            &[pixels],
            &fd(),
        )
        .unwrap();
        assert!(rep.passed(), "{pool:?}: {rep:?}");
    }
}

#[test]
fn local_views_use_resampled_positions_and_differentiate() {
    let cfg = tiny();
    let params = jittered(&cfg, 6);
    let pos = params.get("vision.pos").unwrap().clone();
    let pixels = patchify::<f64>(&[noise_image(8, 2)], 8).unwrap();
    let rep = finite_difference_check(
        |g: &mut Graph<f64>, v| {
            let mut p = params.bind(g, false);
            p.set("vision.pos", v[1]);
            let out = encode_patches(g, &p, &cfg.vision, v[0])?;
            Ok::<_, Error>(g.mean_all(out.embedding)?)
        },
        &[pixels, pos],
        &fd(),
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn text_gradient_wrt_token_table_matches_finite_differences() {
    let cfg = tiny();
    let params = jittered(&cfg, 7);
    let table = params.get("text.tokens").unwrap().clone();
    let toks = vec![vec![4, 5, 6, 2, 0, 0], vec![7, 2, 0, 0, 0, 0]];
    let rep = finite_difference_check(
        |g: &mut Graph<f64>, v| {
            let mut p = params.bind(g, false);
            p.set("text.tokens", v[0]);
            let e = encode_text(g, &p, &cfg.text, &toks)?;
            Ok::<_, Error>(g.mean_all(e)?)
        },
        &[table],
        &fd(),
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn mae_empty_mask_is_zero_loss() {
    let mut cfg = tiny();
    cfg.mae.mask_ratio = 0.0;
    let params = cfg.init::<f64>(0).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let imgs = [noise_image(16, 1)];
    let v = encode_image(&mut g, &p, &cfg.vision, &imgs).unwrap();
    let out = mae_reconstruct(&mut g, &p, &cfg.vision, &cfg.mae, v.patches, v.embedding, &imgs, 0).unwrap();
    assert_eq!(g.value(out.loss).item(), 0.0);
    assert!(out.prediction.is_none());
}

#[test]
fn mae_gray_images_have_zero_targets() {
    let cfg = tiny();
    let params = cfg.init::<f64>(0).unwrap();
    let imgs = [Image::filled(16, 16, [0.4; 3]), Image::filled(16, 16, [0.7; 3])];
    let targets = patchify_targets::<f64>(&imgs, 8, true).unwrap();
    assert!(targets.data().iter().all(|&v| v == 0.0));
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let v = encode_image(&mut g, &p, &cfg.vision, &imgs).unwrap();
    let out = mae_reconstruct(&mut g, &p, &cfg.vision, &cfg.mae, v.patches, v.embedding, &imgs, 9).unwrap();
    let pred = g.value(out.prediction.unwrap());
    let expected = pred.data().iter().map(|v| v * v).sum::<f64>() / pred.numel() as f64;
    assert!((g.value(out.loss).item() - expected).abs() < 1e-15);
    // 2 of 4 patches masked per image
    assert_eq!(pred.shape(), &[4, 192]);
    assert!(out.masks.iter().all(|m| m.iter().filter(|&&x| x).count() == 2));
}

#[test]
fn mae_depends_on_the_bottleneck() {
    let cfg = tiny();
    let params = jittered(&cfg, 8);
    let imgs = [noise_image(16, 4), noise_image(16, 5)];
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let v = encode_image(&mut g, &p, &cfg.vision, &imgs).unwrap();
    let emb = g.value(v.embedding).clone();
    let patches = g.value(v.patches).clone();
    let loss_with = |e: Tensor<f64>| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let e = g.constant(e);
        let pt = g.constant(patches.clone());
        let out = mae_reconstruct(&mut g, &p, &cfg.vision, &cfg.mae, pt, e, &imgs, 3).unwrap();
        g.value(out.loss).item()
    };
    let base = loss_with(emb.clone());
    let zeroed = loss_with(Tensor::zeros(emb.shape().to_vec()));
    assert!(base != zeroed);

    let rep = finite_difference_check(
        |g: &mut Graph<f64>, x| {
            let p = params.bind(g, false);
            let pt = g.constant(patches.clone());
            Ok::<_, Error>(mae_reconstruct(g, &p, &cfg.vision, &cfg.mae, pt, x[0], &imgs, 3)?.loss)
        },
        &[emb.clone()],
        &fd(),
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let e = g.leaf(emb);
    let pt = g.constant(patches);
    let out = mae_reconstruct(&mut g, &p, &cfg.vision, &cfg.mae, pt, e, &imgs, 3).unwrap();
    let grad = g.backward(out.loss).unwrap().wrt(e).unwrap();
    assert!(grad.norm() > 0.0);
}

#[test]
fn untrained_decoder_loss_is_log_vocab() {
    let cfg = tiny();
    let params = cfg.init::<f64>(0).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let e = g.constant(Tensor::from_fn(vec![2, 6], |i| (i as f64 * 0.3).sin()));
    let out = text_decode(&mut g, &p, &cfg.text, &cfg.text_decoder, e, &[vec![4], vec![7]]).unwrap();
    assert!((g.value(out.loss).item() - (10f64).ln()).abs() < 1e-12);
    assert!(text_decode(&mut g, &p, &cfg.text, &cfg.text_decoder, e, &[vec![], vec![4]]).is_err());
    assert!(text_decode(&mut g, &p, &cfg.text, &cfg.text_decoder, e, &[vec![4; 6], vec![4]]).is_err());
}

#[test]
fn decoder_pads_do_not_count() {
    let cfg = tiny();
    let params = jittered(&cfg, 2);
    let run = |targets: &[Vec<u32>]| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let e = g.constant(Tensor::from_fn(vec![2, 6], |i| (i as f64 * 0.7).cos()));
        let out = text_decode(&mut g, &p, &cfg.text, &cfg.text_decoder, e, targets).unwrap();
        g.value(out.loss).item()
    };
    let a = run(&[vec![4, 5, 2], vec![6, 2]]);
    let b = run(&[vec![4, 5, 2, PAD, PAD], vec![6, 2, PAD]]);
    assert!((a - b).abs() < 1e-12, "{a} {b}");
}

#[test]
fn decoder_gradient_and_causality() {
    let cfg = tiny();
    let params = jittered(&cfg, 4);
    let emb = Tensor::from_fn(vec![2, 6], |i| (i as f64 * 0.45).sin());
    let targets = vec![vec![4, 5, 6, 2], vec![7, 2]];
    let rep = finite_difference_check(
        |g: &mut Graph<f64>, x| {
            let p = params.bind(g, false);
            Ok::<_, Error>(text_decode(g, &p, &cfg.text, &cfg.text_decoder, x[0], &targets)?.loss)
        },
        &[emb.clone()],
        &fd(),
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");

    let logits = |t: &[Vec<u32>]| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let e = g.constant(emb.clone());
        let out = text_decode(&mut g, &p, &cfg.text, &cfg.text_decoder, e, t).unwrap();
        g.value(out.logits).clone()
    };
    let a = logits(&[vec![4, 5, 6, 2], vec![7, 2, 3, 3]]);
    let b = logits(&[vec![4, 5, 9, 8], vec![7, 2, 3, 3]]);
    let v = 10;
    // Position k sees inputs up to k: the embedding and targets[..k]. Changing targets 2..
    // leaves positions 0..=2 of row 0 unchanged and changes position 3.
    let row = |t: &Tensor<f64>, k: usize| t.data()[k * v..(k + 1) * v].to_vec();
    for k in 0..=2 {
        assert_eq!(row(&a, k), row(&b, k));
    }
    assert_ne!(row(&a, 3), row(&b, 3));
}

#[test]
fn attention_maps_are_distributions() {
    for pool in [Pool::AttentionMap, Pool::ClassToken] {
        let mut cfg = tiny();
        cfg.vision.pool = pool;
        let params = cfg.init::<f64>(1).unwrap();
        let imgs = [noise_image(16, 1), noise_image(16, 2)];
        let maps = export_attention(&params, &cfg.vision, &imgs).unwrap();
        assert_eq!(maps.len(), 2);
        for m in &maps {
            assert_eq!(m.maps.len(), 2);
            for h in &m.maps {
                assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(h.iter().all(|&v| v >= 0.0));
            }
            let up = m.upsampled(0, 16);
            assert_eq!(up.len(), 256);
            assert_eq!(up[0], m.maps[0][0]);
            assert_eq!(up[255], m.maps[0][3]);
        }
        assert_eq!(maps, export_attention(&params, &cfg.vision, &imgs).unwrap());
    }
}
