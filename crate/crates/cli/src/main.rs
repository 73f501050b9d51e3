use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use tulip_core::models::export_attention;
use tulip_core::scenes::dataset::{Dataset, Split};
use tulip_core::tensor::gradcheck::{FdOptions, FdReport};
use tulip_core::tensor::Real;
use tulip_core::trainer::checkpoint::load_entries;
use tulip_core::trainer::data::{worker_threads, Corpus};
use tulip_core::trainer::gradcheck::{all_passed, grad_check};
use tulip_core::trainer::{
    ablation_ladder, config_diff, image_params, load_checkpoint, run_training, EvalSuite, Precision, RunOptions,
    TrainConfig,
};
use tulip_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tulip", version, about = "Image-text contrastive pretraining on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named starting point the file is applied on top of.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::preset(&self.preset)
            .ok_or_else(|| Error::Config { line: 0, msg: format!("unknown preset {:?} (desk|large)", self.preset) })?;
        if let Some(path) = &self.config {
            cfg.apply_text(&fs::read_to_string(path)?)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to `<out>/images/<split>/*.ppm` plus `manifest.tsv`.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing metrics.csv, timing.csv, checkpoint.tlp and summary.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.tlp`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Evaluate before and after training.
        #[arg(long)]
        eval: bool,
    },
    /// Evaluate a checkpoint and print the result as JSON.
    Eval {
        metric: Metric,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every gradient path (64-bit).
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Write head-averaged pooling attention of test images as 8-bit PGM files.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train each rung of the ablation ladder: siglip, contrast, recons, geco.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "ablate")]
        out: PathBuf,
        /// Comma-separated seeds; one run per rung and seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        eval: bool,
        /// Continue or reuse runs already present under `--out`.
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Retrieval,
    Zeroshot,
    Group,
    Probe,
}

fn train_with(cfg: &TrainConfig, opts: &RunOptions) -> Result<tulip_core::trainer::RunSummary> {
    match cfg.precision {
        Precision::F32 => run_training::<f32>(cfg, opts),
        Precision::F64 => run_training::<f64>(cfg, opts),
    }
}

fn stored_precision(path: &Path) -> Result<Precision> {
    let entries = load_entries(path)?;
    let text = entries
        .iter()
        .find(|e| e.name == "meta.config")
        .ok_or_else(|| Error::Checkpoint("missing meta.config".into()))?
        .to_text()?;
    Ok(TrainConfig::from_text(&text)?.precision)
}

fn eval_metric<T: Real>(path: &Path, metric: Metric) -> Result<serde_json::Value> {
    let (state, cfg) = load_checkpoint::<T>(path)?;
    let suite = EvalSuite::build(&cfg)?;
    let json = |v: Result<serde_json::Value, serde_json::Error>| v.map_err(|e| Error::Invalid { op: "eval", msg: e.to_string() });
    match metric {
        Metric::Retrieval => json(serde_json::to_value(suite.retrieval(&state, &cfg)?)),
        Metric::Zeroshot => Ok(serde_json::json!({ "accuracy": suite.zero_shot(&state, &cfg)? })),
        Metric::Group => json(serde_json::to_value(suite.group(&state, &cfg)?)),
        Metric::Probe => json(serde_json::to_value(suite.probe(&state, &cfg)?)),
    }
}

fn pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    out
}

fn export_attn<T: Real>(path: &Path, out: &Path, count: usize) -> Result<usize> {
    let (state, cfg) = load_checkpoint::<T>(path)?;
    let test = Corpus::load(&cfg, Split::Test)?;
    let n = count.min(test.len());
    let maps = export_attention(image_params(&state, &cfg), &cfg.model.vision, &test.images[..n])?;
    fs::create_dir_all(out)?;
    let size = cfg.model.vision.image_size;
    for (i, m) in maps.iter().enumerate() {
        let heads = m.maps.len();
        let mut mean = vec![0.0; size * size];
        for h in 0..heads {
            for (a, v) in mean.iter_mut().zip(m.upsampled(h, size)) {
                *a += v / heads as f64;
            }
        }
        fs::write(out.join(format!("{:05}.pgm", test.ids[i])), pgm(size, size, &mean))?;
    }
    Ok(n)
}

fn print_grad_check(reports: &[(String, FdReport)]) {
    for (name, r) in reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{verdict:4} {name:40} max rel err {:.3e} ({} coords)", r.max_rel_error, r.checked);
    }
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let data = Dataset::generate(&cfg.data)?;
            data.export(&out, cfg.model.vision.image_size)?;
            println!("wrote {} scenes to {}", data.records.len(), out.display());
        }
        Command::Train { config, out, resume, stop_at, checkpoint_every, eval } => {
            let cfg = config.load()?;
            let opts = RunOptions { out_dir: out, checkpoint_every, stop_at, resume, threads: worker_threads(), evaluate: eval };
            let summary = train_with(&cfg, &opts)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::Eval { metric, checkpoint } => {
            let value = match stored_precision(&checkpoint)? {
                Precision::F32 => eval_metric::<f32>(&checkpoint, metric)?,
                Precision::F64 => eval_metric::<f64>(&checkpoint, metric)?,
            };
            println!("{}", serde_json::to_string_pretty(&value).expect("metric serializes"));
        }
        Command::GradCheck { seed, tolerance } => {
            let reports = grad_check(seed, &FdOptions { tolerance, ..FdOptions::default() })?;
            print_grad_check(&reports);
            if !all_passed(&reports) {
                return Err(Error::Invalid { op: "grad-check", msg: format!("gradients disagree beyond {tolerance:e}") });
            }
        }
        Command::ExportAttn { checkpoint, out, count } => {
            let n = match stored_precision(&checkpoint)? {
                Precision::F32 => export_attn::<f32>(&checkpoint, &out, count)?,
                Precision::F64 => export_attn::<f64>(&checkpoint, &out, count)?,
            };
            println!("wrote {n} attention maps to {}", out.display());
        }
        Command::Ablate { config, out, seeds, eval, resume } => {
            let base = config.load()?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let ladder = ablation_ladder(&base);
            for pair in ladder.windows(2) {
                println!("{} -> {}: {}", pair[0].0, pair[1].0, config_diff(&pair[0].1, &pair[1].1).join(", "));
            }
            for &seed in &seeds {
                for (name, cfg) in &ladder {
                    let cfg = TrainConfig { seed, ..cfg.clone() };
                    let dir = if seeds.len() == 1 { out.join(name) } else { out.join(format!("seed-{seed}")).join(name) };
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("config.txt"), cfg.to_text())?;
                    let opts = RunOptions { out_dir: dir, threads: worker_threads(), evaluate: eval, resume, ..RunOptions::default() };
                    let summary = train_with(&cfg, &opts)?;
                    let total = summary.final_metrics.map(|m| m[5]).unwrap_or(f64::NAN);
                    match summary.trained {
                        Some(r) => println!(
                            "seed {seed} {name:8} total {total:.4} t2i R@1 {:.3} group {:.3} pairwise {:.3}",
                            r.retrieval.t2i_r1, r.group.group, r.group.pairwise
                        ),
                        None => println!("seed {seed} {name:8} total {total:.4}"),
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = format!("Config keys:\n  {}", TrainConfig::keys().join(", "));
    let matches = Cli::command().after_help(keys).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
