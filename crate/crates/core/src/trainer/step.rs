use crate::error::{Error, Result};
use crate::losses::{
    blockwise_siglip_loss, contrastive_total, reconstruction_total, siglip_loss, tulip_total, LossScalars, ScalarVars,
};
use crate::models::{decoder_targets, mae_reconstruct, text_decode, Params};
use crate::rng::{mix, purpose};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::views::{assemble_contrastive_batch, ema_update, LossInputs, TeacherState, ViewSet};

use super::config::{LrSchedule, TrainConfig};
use super::optim::{clip_global_norm, AdamConfig, AdamState};

/// Everything a run needs to continue: student, teacher, optimizer moments and the
/// number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub params: Params<T>,
    pub teacher: TeacherState<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut params: Params<T> = cfg.model.init(cfg.seed)?;
        let s = LossScalars::default();
        *params.get_mut("loss.log_t")? = Tensor::scalar(T::of(s.log_t));
        *params.get_mut("loss.b")? = Tensor::scalar(T::of(s.b));
        Ok(Self {
            step: 0,
            teacher: TeacherState::from_student(&params),
            adam: AdamState::zeros_like(&params),
            params,
        })
    }

    pub fn scalars(&self) -> LossScalars {
        let get = |n: &str| self.params.get(n).map(|t| t.data()[0].f64()).unwrap_or(f64::NAN);
        LossScalars { log_t: get("loss.log_t"), b: get("loss.b") }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub image_text: f64,
    pub image_image: f64,
    pub text_text: f64,
    pub image_recons: f64,
    pub text_recons: f64,
    pub total: f64,
    pub t: f64,
    pub b: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step,l_it,l_ii,l_tt,l_img,l_txt,total,t,b,grad_norm,lr";

    /// Shortest round-trip formatting, so equal rows give equal bytes.
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.image_text,
            self.image_image,
            self.text_text,
            self.image_recons,
            self.text_recons,
            self.total,
            self.t,
            self.b,
            self.grad_norm,
            self.lr
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return None;
        }
        let v = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            step: f[0].parse().ok()?,
            image_text: v(1)?,
            image_image: v(2)?,
            text_text: v(3)?,
            image_recons: v(4)?,
            text_recons: v(5)?,
            total: v(6)?,
            t: v(7)?,
            b: v(8)?,
            grad_norm: v(9)?,
            lr: v(10)?,
        })
    }
}

pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    let warm = cfg.warmup_steps.min(cfg.steps.saturating_sub(1));
    if step < warm {
        return cfg.learning_rate * (step + 1) as f64 / warm as f64;
    }
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            let span = (cfg.steps - warm).max(1) as f64;
            let frac = ((step - warm) as f64 / span).min(1.0);
            cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

fn pair_loss<T: Real>(g: &mut Graph<T>, l: &LossInputs, s: ScalarVars, chunk: usize) -> Result<Var> {
    if chunk == 0 {
        siglip_loss(g, l.rows, l.cols, s, &l.weights)
    } else {
        blockwise_siglip_loss(g, l.rows, l.cols, s, &l.weights, chunk)
    }
}

/// The objective of one step, recorded on `g` with the student bound as leaves.
pub struct Objective {
    pub total: Var,
    pub components: [(&'static str, Option<Var>); 5],
}

/// Builds every loss term for `sets` at `step`; reconstruction reads the image latent on
/// even steps and the text latent on odd steps.
pub fn build_objective<T: Real>(
    g: &mut Graph<T>,
    student: &crate::models::Bound,
    teacher: &crate::models::Bound,
    cfg: &TrainConfig,
    sets: &[ViewSet],
    step: u64,
) -> Result<Objective> {
    let batch = assemble_contrastive_batch(g, sets, student, teacher, &cfg.model, &cfg.routing)?;
    let s = ScalarVars { log_t: student.var("loss.log_t")?, b: student.var("loss.b")? };
    let zero = g.constant(Tensor::scalar(T::zero()));
    let o = &cfg.objective;
    let it = if o.lambda_c > 0.0 { Some(pair_loss(g, &batch.image_text, s, cfg.chunk)?) } else { None };
    let ii = match (&batch.image_image, o.lambda_c > 0.0) {
        (Some(l), true) => Some(pair_loss(g, l, s, cfg.chunk)?),
        _ => None,
    };
    let tt = match (&batch.text_text, o.lambda_c > 0.0) {
        (Some(l), true) => Some(pair_loss(g, l, s, cfg.chunk)?),
        _ => None,
    };
    let (mut img, mut txt) = (None, None);
    if cfg.reconstruction_on() {
        let latent = if step % 2 == 0 { batch.student_image.embedding } else { batch.student_text };
        if o.lambda_i > 0.0 {
            let seed = mix(&[cfg.seed, purpose::MASK, step]);
            let out = mae_reconstruct(
                g,
                student,
                &cfg.model.vision,
                &cfg.model.mae,
                batch.student_image.patches,
                latent,
                &batch.student_images,
                seed,
            )?;
            img = Some(out.loss);
        }
        if o.lambda_t > 0.0 {
            let targets: Vec<Vec<u32>> =
                batch.captions.iter().map(|c| decoder_targets(c, cfg.model.text.context)).collect();
            txt = Some(text_decode(g, student, &cfg.model.text, &cfg.model.text_decoder, latent, &targets)?.loss);
        }
    }
    let cont = contrastive_total(g, it.unwrap_or(zero), ii.unwrap_or(zero), tt.unwrap_or(zero), o.contrastive)?;
    let rec = reconstruction_total(g, img.unwrap_or(zero), txt.unwrap_or(zero), o.lambda_i, o.lambda_t)?;
    let total = tulip_total(g, cont, rec, o.lambda_c, o.lambda_r)?;
    Ok(Objective {
        total,
        components: [("L_IT", it), ("L_II", ii), ("L_TT", tt), ("L_img", img), ("L_txt", txt)],
    })
}

/// Forward, one backward pass over the summed objective, clipping, Adam, then EMA.
/// On a non-finite loss the state is left untouched.
pub fn train_step<T: Real>(state: &mut TrainState<T>, cfg: &TrainConfig, sets: &[ViewSet]) -> Result<MetricsRow> {
    let step = state.step;
    let mut g = Graph::new();
    let student = state.params.bind(&mut g, true);
    let teacher = state.teacher.params.bind(&mut g, false);
    let obj = build_objective(&mut g, &student, &teacher, cfg, sets, step)?;
    let mut vals = [0.0; 5];
    for (k, (name, v)) in obj.components.iter().enumerate() {
        if let Some(v) = v {
            vals[k] = g.value(*v).item().f64();
            if !vals[k].is_finite() {
                return Err(Error::NonFiniteLoss { component: name, step });
            }
        }
    }
    let total = g.value(obj.total).item().f64();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { component: "total", step });
    }
    let grads = g.backward(obj.total)?;
    let mut grads = student.gradients(&grads)?;
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { component: "gradient", step });
    }
    let scalars = state.scalars();
    let lr = learning_rate(cfg, step);
    let adam = AdamConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay };
    state.adam.step(&mut state.params, &grads, lr, &adam)?;
    ema_update(&mut state.teacher, &state.params, cfg.ema.momentum(step, cfg.steps))?;
    state.step += 1;
    Ok(MetricsRow {
        step,
        image_text: vals[0],
        image_image: vals[1],
        text_text: vals[2],
        image_recons: vals[3],
        text_recons: vals[4],
        total,
        t: scalars.t(),
        b: scalars.b,
        grad_norm,
        lr,
    })
}
