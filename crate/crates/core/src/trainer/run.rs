use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Params;
use crate::rng::mix;
use crate::scenes::dataset::Split;
use crate::tensor::Real;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::TrainConfig;
use super::data::{make_provider, BatchSource, Corpus, Prefetcher};
use super::eval::{
    build_quadruples, embed_images, embed_texts, evaluate_group_score, evaluate_linear_probe, evaluate_masked_patches,
    evaluate_retrieval, quadruple_scores, GroupScore, MaskedPatchMse, ProbeResult, Retrieval, ZeroShotTask,
};
use super::step::{train_step, MetricsRow, TrainState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.tlp";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: Option<u64>,
    /// Stop after this many completed steps, leaving a resumable checkpoint.
    pub stop_at: Option<u64>,
    /// Continue from `out_dir/checkpoint.tlp` if it exists.
    pub resume: bool,
    pub threads: usize,
    pub evaluate: bool,
}

/// The image-side parameters used at evaluation: the teacher when it supplies the image
/// rows of the image-text loss, otherwise the student.
pub fn image_params<'a, T: Real>(state: &'a TrainState<T>, cfg: &TrainConfig) -> &'a Params<T> {
    if cfg.routing.teacher_image_text && cfg.routing.image_image {
        &state.teacher.params
    } else {
        &state.params
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub retrieval: Retrieval,
    pub zero_shot: f64,
    pub group: GroupScore,
    pub probe: ProbeResult,
    pub masked_patches: MaskedPatchMse,
}

#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub test: Corpus,
    pub zero_shot: ZeroShotTask,
    pub probe_train: ZeroShotTask,
    pub quadruples: Vec<super::eval::Quadruple>,
}

impl EvalSuite {
    /// Held-out pairs, the attribute classes, and quadruples built from the test scenes.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        let size = cfg.model.vision.image_size;
        let test = Corpus::load(cfg, Split::Test)?;
        let zero_shot = ZeroShotTask::build(size, 1, mix(&[cfg.data.seed, 1]))?;
        let probe_train = ZeroShotTask::build(size, 4, mix(&[cfg.data.seed, 2]))?;
        let quadruples = build_quadruples(&test.specs, size, cfg.data.seed)?;
        Ok(Self { test, zero_shot, probe_train, quadruples })
    }

    pub fn retrieval<T: Real>(&self, state: &TrainState<T>, cfg: &TrainConfig) -> Result<Retrieval> {
        let x = embed_images(image_params(state, cfg), &cfg.model, &self.test.images)?;
        let y = embed_texts(&state.params, &cfg.model, &self.test.captions)?;
        evaluate_retrieval(&x, &y, state.scalars())
    }

    pub fn zero_shot<T: Real>(&self, state: &TrainState<T>, cfg: &TrainConfig) -> Result<f64> {
        self.zero_shot.evaluate(image_params(state, cfg), &state.params, &cfg.model)
    }

    pub fn group<T: Real>(&self, state: &TrainState<T>, cfg: &TrainConfig) -> Result<GroupScore> {
        evaluate_group_score(&quadruple_scores(&self.quadruples, image_params(state, cfg), &state.params, &cfg.model)?)
    }

    pub fn probe<T: Real>(&self, state: &TrainState<T>, cfg: &TrainConfig) -> Result<ProbeResult> {
        let ip = image_params(state, cfg);
        let tx = embed_images(ip, &cfg.model, &self.probe_train.images)?;
        let vx = embed_images(ip, &cfg.model, &self.zero_shot.images)?;
        let classes = self.zero_shot.prompts.len();
        evaluate_linear_probe(&tx, &self.probe_train.labels, &vx, &self.zero_shot.labels, classes)
    }

    pub fn masked_patches<T: Real>(&self, state: &TrainState<T>, cfg: &TrainConfig) -> Result<MaskedPatchMse> {
        evaluate_masked_patches(&state.params, &cfg.model, &self.test.images, cfg.data.seed)
    }

    pub fn evaluate<T: Real>(&self, state: &TrainState<T>, cfg: &TrainConfig) -> Result<EvalReport> {
        Ok(EvalReport {
            step: state.step,
            retrieval: self.retrieval(state, cfg)?,
            zero_shot: self.zero_shot(state, cfg)?,
            group: self.group(state, cfg)?,
            probe: self.probe(state, cfg)?,
            masked_patches: self.masked_patches(state, cfg)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub seed: u64,
    /// Wall-clock seconds spent in the training loop, summed over resumed invocations.
    pub train_seconds: f64,
    pub final_metrics: Option<[f64; 6]>,
    pub initial: Option<EvalReport>,
    #[serde(rename = "final")]
    pub trained: Option<EvalReport>,
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Invalid { op: "read_summary", msg: e.to_string() })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MetricsRow::HEADER) {
        return Err(Error::Invalid { op: "read_metrics", msg: format!("{}: unexpected header", path.display()) });
    }
    lines
        .map(|l| MetricsRow::parse(l).ok_or_else(|| Error::Invalid { op: "read_metrics", msg: format!("bad row {l:?}") }))
        .collect()
}

fn write_metrics_prefix(path: &Path, rows: &[MetricsRow]) -> Result<fs::File> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", MetricsRow::HEADER)?;
    for r in rows {
        writeln!(f, "{}", r.csv())?;
    }
    Ok(f)
}

/// Trains `cfg` into `opts.out_dir`: `metrics.csv` (one row per step, byte-identical for
/// a fixed config), `timing.csv` (wall clock per step), `checkpoint.tlp` and
/// `summary.json`.
pub fn run_training<T: Real>(cfg: &TrainConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&opts.out_dir)?;
    let ckpt = opts.out_dir.join(CHECKPOINT_FILE);
    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let (mut state, mut rows) = if opts.resume && ckpt.exists() {
        let (state, saved) = load_checkpoint::<T>(&ckpt)?;
        if saved != *cfg {
            return Err(Error::Checkpoint("config differs from the one the checkpoint was trained with".into()));
        }
        let mut rows = read_metrics(&metrics_path)?;
        rows.retain(|r| r.step < state.step);
        (state, rows)
    } else {
        (TrainState::<T>::new(cfg)?, Vec::new())
    };
    let mut metrics = write_metrics_prefix(&metrics_path, &rows)?;
    let mut timing = fs::OpenOptions::new().create(true).append(true).open(opts.out_dir.join(TIMING_FILE))?;

    let suite = if opts.evaluate { Some(EvalSuite::build(cfg)?) } else { None };
    let initial = match (&suite, state.step) {
        (Some(s), 0) => Some(s.evaluate(&state, cfg)?),
        (Some(_), _) if opts.resume => read_summary(&opts.out_dir.join(SUMMARY_FILE)).ok().and_then(|p| p.initial),
        _ => None,
    };

    let mut train_seconds = match (opts.resume, read_summary(&opts.out_dir.join(SUMMARY_FILE))) {
        (true, Ok(prev)) if state.step > 0 => prev.train_seconds,
        _ => 0.0,
    };
    let end = opts.stop_at.unwrap_or(cfg.steps).min(cfg.steps);
    let started = Instant::now();
    let ran = state.step < end;
    if ran {
        let corpus = Arc::new(Corpus::load(cfg, Split::Train)?);
        let source = Arc::new(BatchSource::new(cfg, corpus, make_provider(cfg)?)?);
        let mut prefetch = Prefetcher::spawn(source, state.step, end, 2, opts.threads.max(1));
        while state.step < end {
            let step = state.step;
            let batch = prefetch.next(step)?;
            let t0 = Instant::now();
            let row = train_step(&mut state, cfg, &batch)?;
            writeln!(metrics, "{}", row.csv())?;
            writeln!(timing, "{},{:.6}", step, t0.elapsed().as_secs_f64())?;
            if step % 100 == 0 {
                log::info!("step {step}: total {:.4} it {:.4} lr {:.2e}", row.total, row.image_text, row.lr);
            }
            rows.push(row);
            if opts.checkpoint_every.is_some_and(|k| state.step % k == 0) {
                metrics.flush()?;
                save_checkpoint(&ckpt, &state, cfg)?;
            }
        }
    }
    metrics.flush()?;
    train_seconds += started.elapsed().as_secs_f64();
    save_checkpoint(&ckpt, &state, cfg)?;

    // evaluation is a pure function of the checkpoint, so a finished run's report is reused
    let previous = if opts.resume && !ran { read_summary(&opts.out_dir.join(SUMMARY_FILE)).ok() } else { None };
    let trained = match (&suite, state.step == cfg.steps) {
        (Some(s), true) => match previous.and_then(|p| p.trained).filter(|r| r.step == state.step) {
            Some(r) => Some(r),
            None => Some(s.evaluate(&state, cfg)?),
        },
        _ => None,
    };
    let summary = RunSummary {
        steps: state.step,
        seed: cfg.seed,
        train_seconds,
        final_metrics: rows.last().map(|r| [r.image_text, r.image_image, r.text_text, r.image_recons, r.text_recons, r.total]),
        initial,
        trained,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Invalid { op: "summary", msg: e.to_string() })?;
    fs::write(opts.out_dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}

/// Ablation rungs: plain sigmoid image-text training, then image-image and text-text
/// contrast with the EMA teacher, then reconstruction, then generative views. The
/// image-text source of `base` is kept from the second rung on.
pub fn ablation_ladder(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut siglip = base.clone();
    siglip.routing.image_image = false;
    siglip.routing.text_text = false;
    siglip.routing.teacher_image_text = false;
    siglip.objective.lambda_r = 0.0;
    siglip.geco = false;
    let mut contrast = siglip.clone();
    contrast.routing.image_image = true;
    contrast.routing.text_text = true;
    contrast.routing.teacher_image_text = base.routing.teacher_image_text;
    let mut recons = contrast.clone();
    recons.objective.lambda_r = if base.objective.lambda_r > 0.0 { base.objective.lambda_r } else { 0.25 };
    let mut geco = recons.clone();
    geco.geco = true;
    vec![("siglip", siglip), ("contrast", contrast), ("recons", recons), ("geco", geco)]
}

/// Config keys whose values differ between `a` and `b`.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<&'static str> {
    a.entries().into_iter().zip(b.entries()).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect()
}
