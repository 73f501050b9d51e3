//! Finite-difference verification of every gradient the trainer relies on.

use std::sync::Arc;

use crate::error::Result;
use crate::losses::{blockwise_siglip_loss, siglip_loss, PairWeights, ScalarVars};
use crate::models::{encode_image, mae_reconstruct, text_decode, Bound, Params};
use crate::rng::{mix, rng_for};
use crate::scenes::dataset::Split;
use crate::tensor::gradcheck::{finite_difference_check, primitive_suite, FdOptions, FdReport};
use crate::tensor::{Graph, Tensor, Var};

use super::config::TrainConfig;
use super::data::{make_provider, BatchSource, Corpus};
use super::step::{build_objective, TrainState};

/// A model small enough to difference every coordinate of the embedding paths.
pub fn grad_check_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_text(
        "batch_size = 2
         image_size = 32
         patch_size = 16
         vision_width = 8
         vision_depth = 1
         vision_heads = 2
         mlp_ratio = 2
         embed_dim = 6
         text_width = 8
         text_depth = 1
         text_heads = 2
         mae_width = 8
         mae_heads = 2
         decoder_width = 8
         decoder_heads = 2
         local_size = 16
         n_local = 1
         train_size = 8
         val_size = 2
         test_size = 2",
    )
    .expect("grad-check config parses");
    c
}

/// Moves every parameter off its initial value so zero-initialized tensors carry signal.
pub fn jitter(p: &mut Params<f64>, seed: u64) {
    use rand::Rng;
    let mut rng = rng_for(&[seed, 0x6a17]);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
}

/// Checks `f` with respect to the named parameters plus `extra` leaves. The closure sees
/// the parameters bound as constants except the checked names.
fn check_params<F>(params: &Params<f64>, names: &[String], extra: &[Tensor<f64>], opts: &FdOptions, f: F) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).cloned()).collect::<Result<_>>()?;
    inputs.extend(extra.iter().cloned());
    finite_difference_check(
        |g: &mut Graph<f64>, x: &[Var]| {
            let mut p = params.bind(g, false);
            for (n, &v) in names.iter().zip(x) {
                p.set(n, v);
            }
            f(g, &p, &x[names.len()..])
        },
        &inputs,
        opts,
    )
}

fn names_with(params: &Params<f64>, prefix: &str) -> Vec<String> {
    params.names().into_iter().filter(|n| n.starts_with(prefix)).collect()
}

/// Runs the whole suite: every primitive, the sigmoid pairwise loss under random
/// {+1, −1, 0} weights (plain and blockwise), both reconstruction losses, and the full
/// objective on a 2-sample batch at both reconstruction parities.
pub fn grad_check(seed: u64, opts: &FdOptions) -> Result<Vec<(String, FdReport)>> {
    use rand::Rng;
    let mut out: Vec<(String, FdReport)> =
        primitive_suite(3, seed, opts)?.into_iter().map(|(n, r)| (format!("primitive {n}"), r)).collect();

    let mut rng = rng_for(&[seed, 0x5167]);
    let (b, d) = (4, 5);
    let mut plain: Option<FdReport> = None;
    let mut blocked: Option<FdReport> = None;
    for _ in 0..5 {
        let x = Tensor::from_fn(vec![b, d], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::from_fn(vec![b, d], |_| rng.random_range(-1.0..1.0));
        let s = Tensor::new(vec![2], vec![rng.random_range(0.0..2.5), rng.random_range(-5.0..5.0)])?;
        let entries: Vec<i8> = (0..b * b).map(|_| rng.random_range(-1i8..=1)).collect();
        let z = PairWeights::new(b, b, entries)?;
        for (chunk, slot) in [(None, &mut plain), (Some(3), &mut blocked)] {
            let rep = finite_difference_check(
                |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
                    let xn = g.l2_normalize(v[0])?;
                    let yn = g.l2_normalize(v[1])?;
                    let sv = ScalarVars { log_t: g.gather_rows(v[2], &[0])?, b: g.gather_rows(v[2], &[1])? };
                    match chunk {
                        None => siglip_loss(g, xn, yn, sv, &z),
                        Some(c) => blockwise_siglip_loss(g, xn, yn, sv, &z, c),
                    }
                },
                &[x.clone(), y.clone(), s.clone()],
                opts,
            )?;
            match slot {
                Some(w) => w.merge(&rep),
                None => *slot = Some(rep),
            }
        }
    }
    out.push(("sigmoid loss".into(), plain.expect("trials ran")));
    out.push(("sigmoid loss blockwise".into(), blocked.expect("trials ran")));

    let cfg = grad_check_config();
    let m = &cfg.model;
    let mut params: Params<f64> = m.init(mix(&[seed, 1]))?;
    jitter(&mut params, seed);
    let corpus = Arc::new(Corpus::load(&cfg, Split::Train)?);
    let images = vec![corpus.images[0].clone(), corpus.images[1].clone()];
    let targets = vec![corpus.captions[0].clone(), corpus.captions[1].clone()];

    let (emb, patches) = {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let v = encode_image(&mut g, &p, &m.vision, &images)?;
        (g.value(v.embedding).clone(), g.value(v.patches).clone())
    };
    let rep = check_params(&params, &names_with(&params, "mae."), &[emb.clone(), patches], opts, |g, p, x| {
        Ok(mae_reconstruct(g, p, &m.vision, &m.mae, x[1], x[0], &images, 3)?.loss)
    })?;
    out.push(("image reconstruction".into(), rep));
    let rep = check_params(&params, &names_with(&params, "tdec."), &[emb], opts, |g, p, x| {
        Ok(text_decode(g, p, &m.text, &m.text_decoder, x[0], &targets)?.loss)
    })?;
    out.push(("text reconstruction".into(), rep));

    let mut state = TrainState::<f64>::new(&cfg)?;
    jitter(&mut state.params, mix(&[seed, 2]));
    jitter(&mut state.teacher.params, mix(&[seed, 3]));
    let source = BatchSource::new(&cfg, corpus, make_provider(&cfg)?)?;
    let sets = source.batch(0, 1)?;
    let all = state.params.names();
    let sampled = FdOptions { max_coords: Some(opts.max_coords.unwrap_or(6)), ..opts.clone() };
    for step in [0u64, 1] {
        let teacher = &state.teacher.params;
        let rep = check_params(&state.params, &all, &[], &sampled, |g, p, _| {
            let t = teacher.bind(g, false);
            let obj = build_objective(g, p, &t, &cfg, &sets, step)?;
            Ok(obj.total)
        })?;
        out.push((format!("full objective, step parity {}", step % 2), rep));
    }
    Ok(out)
}

pub fn all_passed(reports: &[(String, FdReport)]) -> bool {
    reports.iter().all(|(_, r)| r.passed())
}
