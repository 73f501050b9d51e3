//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use tulip_core::scenes::dataset::Split;
use tulip_core::tensor::Tensor;
use tulip_core::trainer::data::{make_provider, BatchSource, Corpus};
use tulip_core::trainer::TrainConfig;
use tulip_core::views::ViewSet;

/// `n` unit rows of width `d` from a fixed sequence.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut s = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut data: Vec<f32> = (0..n * d)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![n, d], data).expect("shape matches data")
}

/// The default config over a smaller corpus, and the view sets of its first batch.
pub fn default_batch() -> (TrainConfig, Vec<ViewSet>) {
    let mut cfg = TrainConfig::default();
    cfg.data.train = 256;
    let corpus = Arc::new(Corpus::load(&cfg, Split::Train).expect("corpus"));
    let source = BatchSource::new(&cfg, corpus, make_provider(&cfg).expect("provider")).expect("source");
    let sets = source.batch(0, 1).expect("batch");
    (cfg, sets)
}
