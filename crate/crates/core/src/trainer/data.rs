use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{mix, purpose, rng_for};
use crate::scenes::dataset::{read_manifest, Dataset, Record, Split};
use crate::scenes::{caption, Image, SceneSpec, Vocab};
use crate::views::{
    build_view_set, geco_augment, ExternalProvider, GecoCache, GecoMode, GecoProvider, GecoRequest, GecoResponse,
    SyntheticProvider, ViewSet,
};

use super::config::TrainConfig;

pub const THREADS_VAR: &str = "TULIP_THREADS";
pub const DATA_DIR_VAR: &str = "TULIP_DATA_DIR";

/// Worker count from `TULIP_THREADS`, at least 1.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_VAR).ok().and_then(|v| v.parse().ok()).filter(|&n: &usize| n > 0).unwrap_or(1)
}

pub fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_VAR).map(PathBuf::from)
}

/// Rendered images with their reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub ids: Vec<u64>,
    pub specs: Vec<SceneSpec>,
    pub images: Vec<Image>,
    pub captions: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn from_records(records: &[&Record], size: usize) -> Result<Self> {
        Ok(Self {
            ids: records.iter().map(|r| r.id).collect(),
            specs: records.iter().map(|r| r.spec.clone()).collect(),
            images: records.iter().map(|r| r.render(size)).collect::<Result<_>>()?,
            captions: records.iter().map(|r| r.caption()).collect(),
        })
    }

    /// Loads one split of an exported dataset, checking the image size.
    pub fn from_dir(dir: &Path, split: Split, size: usize) -> Result<Self> {
        let vocab = Vocab::shared();
        let mut c = Self { ids: vec![], specs: vec![], images: vec![], captions: vec![] };
        for (i, e) in read_manifest(dir)?.into_iter().enumerate() {
            if e.split != split {
                continue;
            }
            let img = Image::from_ppm(&std::fs::read(dir.join(&e.image))?)?;
            if img.height != size || img.width != size {
                return Err(Error::Scene(format!("{}: expected {size}px images", e.image)));
            }
            c.ids.push(i as u64);
            c.specs.push(e.spec);
            c.images.push(img);
            c.captions.push(vocab.tokenize(&e.caption));
        }
        Ok(c)
    }

    /// A split from `TULIP_DATA_DIR` when set, otherwise generated from the config.
    pub fn load(cfg: &TrainConfig, split: Split) -> Result<Self> {
        let size = cfg.model.vision.image_size;
        match data_dir() {
            Some(dir) => Self::from_dir(&dir, split, size),
            None => Self::from_records(&Dataset::generate(&cfg.data)?.split(split), size),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn make_provider(cfg: &TrainConfig) -> Result<Option<Arc<dyn GecoProvider>>> {
    if !cfg.geco {
        return Ok(None);
    }
    if cfg.geco_command.is_empty() {
        let p = SyntheticProvider { images: cfg.geco_images, captions: cfg.geco_captions, ..SyntheticProvider::default() };
        return Ok(Some(Arc::new(p)));
    }
    let p = ExternalProvider::spawn("sh", &["-c".to_string(), cfg.geco_command.clone()])?;
    Ok(Some(Arc::new(p)))
}

/// Deterministic batches: the content of step `s` depends only on the config, the
/// corpus and `s`, so batches can be built in any order and on any thread.
pub struct BatchSource {
    cfg: TrainConfig,
    corpus: Arc<Corpus>,
    provider: Option<Arc<dyn GecoProvider>>,
    cache: Mutex<GecoCache>,
}

impl BatchSource {
    pub fn new(cfg: &TrainConfig, corpus: Arc<Corpus>, provider: Option<Arc<dyn GecoProvider>>) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Scene("training corpus is empty".into()));
        }
        Ok(Self { cfg: cfg.clone(), corpus, provider, cache: Mutex::new(GecoCache::default()) })
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.corpus.len()).collect();
        p.shuffle(&mut rng_for(&[self.cfg.seed, purpose::BATCH, epoch]));
        p
    }

    /// `(corpus index, epoch)` of every sample of step `step`.
    pub fn indices(&self, step: u64) -> Vec<(usize, u64)> {
        let n = self.corpus.len() as u64;
        let b = self.cfg.batch_size as u64;
        let mut out = Vec::with_capacity(b as usize);
        let mut perm: Option<(u64, Vec<usize>)> = None;
        for k in step * b..(step + 1) * b {
            let epoch = k / n;
            if perm.as_ref().map(|p| p.0) != Some(epoch) {
                perm = Some((epoch, self.permutation(epoch)));
            }
            out.push((perm.as_ref().unwrap().1[(k % n) as usize], epoch));
        }
        out
    }

    fn training_caption(&self, i: usize, epoch: u64) -> Vec<u32> {
        let id = self.corpus.ids[i];
        let mut rng = rng_for(&[self.cfg.seed, purpose::RECAP, id, epoch]);
        if rng.random_bool(self.cfg.recap_fraction()) {
            caption(&self.corpus.specs[i], mix(&[self.cfg.seed, id, epoch]))
        } else {
            self.corpus.captions[i].clone()
        }
    }

    fn geco(&self, i: usize, epoch: u64) -> Option<GecoResponse> {
        let provider = self.provider.as_deref()?;
        let id = self.corpus.ids[i];
        let seed = match self.cfg.geco_mode {
            GecoMode::Cached => mix(&[self.cfg.seed, purpose::GECO, id]),
            GecoMode::Online => mix(&[self.cfg.seed, purpose::GECO, id, epoch]),
        };
        let req = GecoRequest { sample_id: id, image: self.corpus.images[i].clone(), caption: self.corpus.captions[i].clone(), seed };
        match self.cfg.geco_mode {
            GecoMode::Cached => self.cache.lock().ok()?.get_or_generate(0, &req, provider),
            GecoMode::Online => match geco_augment(&req, provider) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("sample {id}: {e}; using pixel views only");
                    None
                }
            },
        }
    }

    pub fn sample(&self, i: usize, epoch: u64) -> Result<ViewSet> {
        let id = self.corpus.ids[i];
        let cap = self.training_caption(i, epoch);
        let geco = self.geco(i, epoch);
        let seed = mix(&[self.cfg.seed, id, epoch]);
        build_view_set(id, &self.corpus.images[i], &cap, &self.cfg.views, self.cfg.model.vision.patch_size, geco.as_ref(), seed)
    }

    pub fn batch(&self, step: u64, threads: usize) -> Result<Vec<ViewSet>> {
        let idx = self.indices(step);
        if threads <= 1 {
            return idx.iter().map(|&(i, e)| self.sample(i, e)).collect();
        }
        let per = idx.len().div_ceil(threads);
        let parts: Vec<Result<Vec<ViewSet>>> = std::thread::scope(|s| {
            let handles: Vec<_> = idx
                .chunks(per)
                .map(|chunk| s.spawn(move || chunk.iter().map(|&(i, e)| self.sample(i, e)).collect::<Result<Vec<_>>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("view worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(idx.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Builds batches for `start..end` on a background thread through a bounded queue.
pub struct Prefetcher {
    rx: Receiver<(u64, Result<Vec<ViewSet>>)>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(source: Arc<BatchSource>, start: u64, end: u64, depth: usize, threads: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            for step in start..end {
                if tx.send((step, source.batch(step, threads))).is_err() {
                    break;
                }
            }
        });
        Self { rx, handle: Some(handle) }
    }

    pub fn next(&mut self, step: u64) -> Result<Vec<ViewSet>> {
        let (s, b) = self.rx.recv().map_err(|_| Error::Scene("batch producer stopped".into()))?;
        debug_assert_eq!(s, step);
        b
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // unblock the producer before joining
        let (_tx, rx) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
