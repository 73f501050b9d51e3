use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{ContrastiveWeights, CrossSampleNegatives, ObjectiveWeights};
use crate::models::{ModelConfig, Pool};
use crate::scenes::dataset::DatasetConfig;
use crate::views::{AugmentPolicy, EmaSchedule, GecoMode, Routing, ViewConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to zero at the last step.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub objective: ObjectiveWeights,
    pub ema: EmaSchedule,
    pub views: ViewConfig,
    pub routing: Routing,
    pub geco: bool,
    pub geco_mode: GecoMode,
    pub geco_images: bool,
    pub geco_captions: bool,
    /// Shell command of an external provider; empty selects the in-process one.
    pub geco_command: String,
    /// `None` picks 0.2, or 0.5 when text reconstruction is on.
    pub recap_fraction: Option<f64>,
    /// Tile size of the blockwise loss; 0 evaluates the full matrix at once.
    pub chunk: usize,
    pub precision: Precision,
    pub model: ModelConfig,
    pub data: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            steps: 3000,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            warmup_steps: 100,
            weight_decay: 1e-4,
            grad_clip: 2.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            objective: ObjectiveWeights::default(),
            ema: EmaSchedule::default(),
            views: ViewConfig::default(),
            routing: Routing { teacher_image_text: false, ..Routing::default() },
            geco: true,
            geco_mode: GecoMode::Cached,
            geco_images: true,
            geco_captions: true,
            geco_command: String::new(),
            recap_fraction: None,
            chunk: 0,
            precision: Precision::F32,
            model: ModelConfig::default(),
            data: DatasetConfig::default(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(format!("expected true/false, got {v:?}")),
    }
}

fn parse_pair(v: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = v.split([',', ' ']).filter(|s| !s.is_empty()).collect();
    match parts[..] {
        [a, b] => Ok((parse(a)?, parse(b)?)),
        _ => Err(format!("expected two numbers, got {v:?}")),
    }
}

impl TrainConfig {
    /// The large-batch settings of the original recipe, kept for reference.
    pub fn large_batch_preset() -> Self {
        Self { batch_size: 49_152, learning_rate: 1e-5, ..Self::default() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::default()),
            "large" => Some(Self::large_batch_preset()),
            _ => None,
        }
    }

    pub fn recap_fraction(&self) -> f64 {
        let text_recons = self.objective.lambda_r > 0.0 && self.objective.lambda_t > 0.0;
        self.recap_fraction.unwrap_or(if text_recons { 0.5 } else { 0.2 })
    }

    pub fn reconstruction_on(&self) -> bool {
        self.objective.lambda_r > 0.0 && (self.objective.lambda_i > 0.0 || self.objective.lambda_t > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config { line: 0, msg });
        if self.geco_command.contains('#') || self.geco_command.contains('\n') {
            return err("geco_command cannot contain `#` or a newline".into());
        }
        let o = &self.objective;
        let c = &o.contrastive;
        for (name, w) in [
            ("lambda_c", o.lambda_c),
            ("lambda_r", o.lambda_r),
            ("lambda_i", o.lambda_i),
            ("lambda_t", o.lambda_t),
            ("w_image_text", c.image_text),
            ("w_image_image", c.image_image),
            ("w_text_text", c.text_text),
            ("weight_decay", self.weight_decay),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return err(format!("{name} must be a finite non-negative number"));
            }
        }
        if let Some(r) = self.recap_fraction {
            if !(0.0..=1.0).contains(&r) {
                return err("recap_fraction must lie in [0, 1]".into());
            }
        }
        if o.lambda_c > 0.0 && self.batch_size < 2 {
            return err("batch_size must be at least 2 when a contrastive loss is enabled".into());
        }
        if self.batch_size == 0 || self.steps == 0 {
            return err("batch_size and steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0 && self.adam_eps > 0.0) {
            return err("learning_rate, grad_clip and adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("Adam betas must lie in [0, 1)".into());
        }
        match self.ema {
            EmaSchedule::Constant(m) if !(0.0..=1.0).contains(&m) => return err("ema momentum outside [0, 1]".into()),
            EmaSchedule::Cosine { start, end } if !((0.0..=1.0).contains(&start) && (0.0..=1.0).contains(&end)) => {
                return err("ema momentum outside [0, 1]".into())
            }
            _ => {}
        }
        self.views.policy.validate().map_err(|e| Error::Config { line: 0, msg: e.to_string() })?;
        self.model.validate().map_err(|e| Error::Config { line: 0, msg: e.to_string() })?;
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let o = &self.objective;
        let m = &self.model;
        let mc = &self.views.multicrop;
        let r = &self.routing;
        let pair = |(a, b): (f64, f64)| format!("{a}, {b}");
        vec![
            ("seed", self.seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_schedule", match self.lr_schedule { LrSchedule::Constant => "constant", LrSchedule::Cosine => "cosine" }.into()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("lambda_c", o.lambda_c.to_string()),
            ("lambda_r", o.lambda_r.to_string()),
            ("lambda_i", o.lambda_i.to_string()),
            ("lambda_t", o.lambda_t.to_string()),
            ("w_image_text", o.contrastive.image_text.to_string()),
            ("w_image_image", o.contrastive.image_image.to_string()),
            ("w_text_text", o.contrastive.text_text.to_string()),
            (
                "ema",
                match self.ema {
                    EmaSchedule::Constant(m) => format!("constant {m}"),
                    EmaSchedule::Cosine { start, end } => format!("cosine {start} {end}"),
                },
            ),
            ("n_global", mc.n_global.to_string()),
            ("n_local", mc.n_local.to_string()),
            ("global_scale", pair(mc.global_scale)),
            ("local_scale", pair(mc.local_scale)),
            ("local_size", mc.local_size.to_string()),
            ("augment", (self.views.policy.jitter.is_some() || self.views.policy.blur.is_some()).to_string()),
            ("hflip", self.views.policy.hflip.to_string()),
            ("text_augment", self.views.text_augment.to_string()),
            ("image_image", r.image_image.to_string()),
            ("text_text", r.text_text.to_string()),
            ("locals_in_image_text", r.locals_in_image_text.to_string()),
            ("image_text_source", if r.teacher_image_text { "teacher" } else { "student" }.into()),
            (
                "cross_sample_negatives",
                match r.cross_sample_negatives {
                    CrossSampleNegatives::Mask => "mask",
                    CrossSampleNegatives::Negative => "negative",
                }
                .into(),
            ),
            ("geco", self.geco.to_string()),
            ("geco_mode", match self.geco_mode { GecoMode::Online => "online", GecoMode::Cached => "cached" }.into()),
            ("geco_images", self.geco_images.to_string()),
            ("geco_captions", self.geco_captions.to_string()),
            ("geco_command", self.geco_command.clone()),
            ("recap_fraction", self.recap_fraction.map_or("auto".into(), |v| v.to_string())),
            ("chunk", self.chunk.to_string()),
            ("precision", match self.precision { Precision::F32 => "f32", Precision::F64 => "f64" }.into()),
            ("image_size", m.vision.image_size.to_string()),
            ("patch_size", m.vision.patch_size.to_string()),
            ("vision_width", m.vision.width.to_string()),
            ("vision_depth", m.vision.depth.to_string()),
            ("vision_heads", m.vision.heads.to_string()),
            ("vision_pool", match m.vision.pool { Pool::AttentionMap => "map", Pool::ClassToken => "cls" }.into()),
            ("mlp_ratio", m.vision.mlp_ratio.to_string()),
            ("embed_dim", m.vision.embed_dim.to_string()),
            ("text_context", m.text.context.to_string()),
            ("text_width", m.text.width.to_string()),
            ("text_depth", m.text.depth.to_string()),
            ("text_heads", m.text.heads.to_string()),
            ("mae_mask_ratio", m.mae.mask_ratio.to_string()),
            ("mae_width", m.mae.width.to_string()),
            ("mae_depth", m.mae.depth.to_string()),
            ("mae_heads", m.mae.heads.to_string()),
            ("norm_pix", m.mae.norm_pix.to_string()),
            ("decoder_width", m.text_decoder.width.to_string()),
            ("decoder_depth", m.text_decoder.depth.to_string()),
            ("decoder_heads", m.text_decoder.heads.to_string()),
            ("data_seed", self.data.seed.to_string()),
            ("train_size", self.data.train.to_string()),
            ("val_size", self.data.val.to_string()),
            ("test_size", self.data.test.to_string()),
            ("single_fraction", self.data.single_fraction.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let o = &mut self.objective;
        let m = &mut self.model;
        let mc = &mut self.views.multicrop;
        let r = &mut self.routing;
        match key {
            "seed" => self.seed = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "steps" => self.steps = parse(v)?,
            "learning_rate" => self.learning_rate = parse(v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(format!("unknown schedule {v:?}")),
                }
            }
            "warmup_steps" => self.warmup_steps = parse(v)?,
            "weight_decay" => self.weight_decay = parse(v)?,
            "grad_clip" => self.grad_clip = parse(v)?,
            "beta1" => self.beta1 = parse(v)?,
            "beta2" => self.beta2 = parse(v)?,
            "adam_eps" => self.adam_eps = parse(v)?,
            "lambda_c" => o.lambda_c = parse(v)?,
            "lambda_r" => o.lambda_r = parse(v)?,
            "lambda_i" => o.lambda_i = parse(v)?,
            "lambda_t" => o.lambda_t = parse(v)?,
            "w_image_text" => o.contrastive = ContrastiveWeights { image_text: parse(v)?, ..o.contrastive },
            "w_image_image" => o.contrastive = ContrastiveWeights { image_image: parse(v)?, ..o.contrastive },
            "w_text_text" => o.contrastive = ContrastiveWeights { text_text: parse(v)?, ..o.contrastive },
            "ema" => {
                let parts: Vec<&str> = v.split_whitespace().collect();
                self.ema = match parts[..] {
                    ["constant", m] => EmaSchedule::Constant(parse(m)?),
                    ["cosine", a, b] => EmaSchedule::Cosine { start: parse(a)?, end: parse(b)? },
                    _ => return Err(format!("expected `constant M` or `cosine START END`, got {v:?}")),
                }
            }
            "n_global" => mc.n_global = parse(v)?,
            "n_local" => mc.n_local = parse(v)?,
            "global_scale" => mc.global_scale = parse_pair(v)?,
            "local_scale" => mc.local_scale = parse_pair(v)?,
            "local_size" => mc.local_size = parse(v)?,
            "augment" => {
                let hflip = self.views.policy.hflip;
                let base = if parse_bool(v)? { AugmentPolicy::default() } else { AugmentPolicy::identity() };
                self.views.policy = AugmentPolicy { hflip, ..base };
            }
            "hflip" => self.views.policy.hflip = parse_bool(v)?,
            "text_augment" => self.views.text_augment = parse_bool(v)?,
            "image_image" => r.image_image = parse_bool(v)?,
            "text_text" => r.text_text = parse_bool(v)?,
            "locals_in_image_text" => r.locals_in_image_text = parse_bool(v)?,
            "image_text_source" => {
                r.teacher_image_text = match v {
                    "teacher" => true,
                    "student" => false,
                    _ => return Err(format!("expected teacher or student, got {v:?}")),
                }
            }
            "cross_sample_negatives" => {
                r.cross_sample_negatives = match v {
                    "mask" => CrossSampleNegatives::Mask,
                    "negative" => CrossSampleNegatives::Negative,
                    _ => return Err(format!("expected mask or negative, got {v:?}")),
                }
            }
            "geco" => self.geco = parse_bool(v)?,
            "geco_mode" => {
                self.geco_mode = match v {
                    "online" => GecoMode::Online,
                    "cached" => GecoMode::Cached,
                    _ => return Err(format!("expected online or cached, got {v:?}")),
                }
            }
            "geco_images" => self.geco_images = parse_bool(v)?,
            "geco_captions" => self.geco_captions = parse_bool(v)?,
            "geco_command" => self.geco_command = v.to_string(),
            "recap_fraction" => self.recap_fraction = if v == "auto" { None } else { Some(parse(v)?) },
            "chunk" => self.chunk = parse(v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("expected f32 or f64, got {v:?}")),
                }
            }
            "image_size" => m.vision.image_size = parse(v)?,
            "patch_size" => m.vision.patch_size = parse(v)?,
            "vision_width" => m.vision.width = parse(v)?,
            "vision_depth" => m.vision.depth = parse(v)?,
            "vision_heads" => m.vision.heads = parse(v)?,
            "vision_pool" => {
                m.vision.pool = match v {
                    "map" => Pool::AttentionMap,
                    "cls" => Pool::ClassToken,
                    _ => return Err(format!("expected map or cls, got {v:?}")),
                }
            }
            "mlp_ratio" => {
                m.vision.mlp_ratio = parse(v)?;
                m.text.mlp_ratio = m.vision.mlp_ratio;
            }
            "embed_dim" => {
                m.vision.embed_dim = parse(v)?;
                m.text.embed_dim = m.vision.embed_dim;
            }
            "text_context" => {
                m.text.context = parse(v)?;
                m.text.pool_index = m.text.context.saturating_sub(1);
            }
            "text_width" => m.text.width = parse(v)?,
            "text_depth" => m.text.depth = parse(v)?,
            "text_heads" => m.text.heads = parse(v)?,
            "mae_mask_ratio" => m.mae.mask_ratio = parse(v)?,
            "mae_width" => m.mae.width = parse(v)?,
            "mae_depth" => m.mae.depth = parse(v)?,
            "mae_heads" => m.mae.heads = parse(v)?,
            "norm_pix" => m.mae.norm_pix = parse_bool(v)?,
            "decoder_width" => m.text_decoder.width = parse(v)?,
            "decoder_depth" => m.text_decoder.depth = parse(v)?,
            "decoder_heads" => m.text_decoder.heads = parse(v)?,
            "data_seed" => self.data.seed = parse(v)?,
            "train_size" => self.data.train = parse(v)?,
            "val_size" => self.data.val = parse(v)?,
            "test_size" => self.data.test = parse(v)?,
            "single_fraction" => self.data.single_fraction = parse(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines over `self`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: i + 1, msg: format!("expected `key = value`, got {line:?}") })?;
            self.set(k.trim(), v.trim()).map_err(|msg| Error::Config { line: i + 1, msg })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
