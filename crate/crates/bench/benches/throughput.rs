use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use tulip_bench::{default_batch, unit_rows};
use tulip_core::losses::{blockwise_siglip_loss, siglip_loss, PairWeights, ScalarVars};
use tulip_core::models::encode_image;
use tulip_core::tensor::{Graph, Tensor};
use tulip_core::trainer::{train_step, TrainState};

fn loss(c: &mut Criterion) {
    let (x, y) = (unit_rows(64, 64, 1), unit_rows(64, 64, 2));
    let z = PairWeights::standard(64);
    let run = |chunk: Option<usize>| {
        let mut g = Graph::<f32>::new();
        let (xv, yv) = (g.leaf(x.clone()), g.leaf(y.clone()));
        let s = ScalarVars { log_t: g.leaf(Tensor::scalar(2.3)), b: g.leaf(Tensor::scalar(10.0)) };
        let l = match chunk {
            None => siglip_loss(&mut g, xv, yv, s, &z),
            Some(c) => blockwise_siglip_loss(&mut g, xv, yv, s, &z, c),
        }
        .unwrap();
        g.backward(l).unwrap()
    };
    c.bench_function("sigmoid loss 64x64 fwd+bwd", |b| b.iter(|| run(None)));
    c.bench_function("sigmoid loss 64x64 blockwise 16", |b| b.iter(|| run(Some(16))));
}

fn encoder(c: &mut Criterion) {
    let (cfg, sets) = default_batch();
    let params = cfg.model.init::<f32>(0).unwrap();
    let images: Vec<_> = sets.iter().map(|s| s.globals[0].clone()).collect();
    c.bench_function("vision encoder batch 64 fwd", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let p = params.bind(&mut g, false);
            encode_image(&mut g, &p, &cfg.model.vision, &images).unwrap().embedding
        })
    });
}

fn step(c: &mut Criterion) {
    let (cfg, sets) = default_batch();
    let state = TrainState::<f32>::new(&cfg).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("default step batch 64", |b| {
        b.iter_batched(|| state.clone(), |mut s| train_step(&mut s, &cfg, &sets).unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, loss, encoder, step);
criterion_main!(benches);
