//! Scene corpora, splits and on-disk export (PPM images plus a tab-separated manifest).

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;

use super::{caption, render, Image, SceneSpec, Vocab};
use crate::error::{Error, Result};
use crate::rng::{mix, purpose, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of scenes drawn from the one-group subspace.
    pub single_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 0, train: 4000, val: 500, test: 500, single_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub spec: SceneSpec,
    pub split: Split,
    /// Template seed of the reference caption.
    pub caption_seed: u64,
    /// Seed of the reference rendering.
    pub render_seed: u64,
}

impl Record {
    pub fn caption(&self) -> Vec<u32> {
        caption(&self.spec, self.caption_seed)
    }

    pub fn render(&self, size: usize) -> Result<Image> {
        render(&self.spec, size, self.render_seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    /// Draws distinct scenes (distinct up to render equivalence) and assigns splits in
    /// draw order, so splits never share a scene.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        let total = cfg.train + cfg.val + cfg.test;
        if total > super::SINGLE_SPECS / 2 + super::PAIR_SPECS / 2 {
            return Err(Error::Scene(format!("{total} distinct scenes requested, too many for the scene space")));
        }
        if !(0.0..=1.0).contains(&cfg.single_fraction) {
            return Err(Error::Scene("single_fraction must lie in [0, 1]".into()));
        }
        let mut rng = rng_for(&[cfg.seed, purpose::SPLIT]);
        let mut seen = HashSet::new();
        let mut records = Vec::with_capacity(total);
        let mut k = 0u64;
        let mut singles_seen = 0usize;
        while records.len() < total {
            k += 1;
            let one = rng.random_bool(cfg.single_fraction) && singles_seen < super::SINGLE_SPECS;
            let spec = super::sample_scene_with(mix(&[cfg.seed, k]), if one { 1 } else { 2 });
            if !seen.insert(spec.canonical_key()) {
                continue;
            }
            if one {
                singles_seen += 1;
            }
            let i = records.len();
            let split = if i < cfg.train {
                Split::Train
            } else if i < cfg.train + cfg.val {
                Split::Val
            } else {
                Split::Test
            };
            let id = i as u64;
            records.push(Record {
                id,
                spec,
                split,
                caption_seed: mix(&[cfg.seed, id, purpose::CAPTION]),
                render_seed: mix(&[cfg.seed, id, purpose::RENDER]),
            });
        }
        Ok(Self { records })
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Writes `images/<split>/<id>.ppm` and `manifest.tsv` under `dir`.
    pub fn export(&self, dir: &Path, size: usize) -> Result<()> {
        let vocab = Vocab::shared();
        for s in [Split::Train, Split::Val, Split::Test] {
            fs::create_dir_all(dir.join("images").join(s.name()))?;
        }
        let mut manifest = std::io::BufWriter::new(fs::File::create(dir.join("manifest.tsv"))?);
        for r in &self.records {
            let rel = format!("images/{}/{:05}.ppm", r.split.name(), r.id);
            fs::write(dir.join(&rel), r.render(size)?.to_ppm())?;
            writeln!(manifest, "{rel}\t{}\t{}\t{}", vocab.to_text(&r.caption())?, r.spec, r.split.name())?;
        }
        manifest.flush()?;
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: String,
    pub caption: String,
    pub spec: SceneSpec,
    pub split: Split,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(dir.join("manifest.tsv"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |m: &str| Error::Scene(format!("manifest line {}: {m}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let [image, caption, spec, split] = f.as_slice() else { return Err(bad("expected 4 tab-separated fields")) };
            Ok(ManifestEntry {
                image: image.to_string(),
                caption: caption.to_string(),
                spec: spec.parse()?,
                split: Split::parse(split).ok_or_else(|| bad("unknown split"))?,
            })
        })
        .collect()
}
