//! Pairwise sigmoid contrastive loss, pair-weight rules and objective totals.

mod siglip;
mod weights;

pub use siglip::{blockwise_siglip_loss, siglip_loss, LossScalars, ScalarVars, NORM_TOLERANCE};
pub use weights::{cross_modal, same_modality, CrossSampleNegatives, Modality, PairWeights, Provenance};

use crate::error::{invalid, Result};
use crate::tensor::{Graph, Real, Var};

fn check_weight(op: &'static str, name: &str, w: f64) -> Result<()> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(invalid(op, format!("{name} must be a finite non-negative weight, got {w}")));
    }
    Ok(())
}

/// Weighted sum of graph scalars; a zero weight drops its term from the graph entirely.
fn weighted<T: Real>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { v } else { g.scale(v, w)? };
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(g.constant(crate::tensor::Tensor::scalar(T::zero()))),
    }
}

/// Per-term weights inside the contrastive sum; all 1 reproduces the plain sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveWeights {
    pub image_text: f64,
    pub image_image: f64,
    pub text_text: f64,
}

impl Default for ContrastiveWeights {
    fn default() -> Self {
        Self { image_text: 1.0, image_image: 1.0, text_text: 1.0 }
    }
}

pub fn contrastive_total<T: Real>(g: &mut Graph<T>, it: Var, ii: Var, tt: Var, w: ContrastiveWeights) -> Result<Var> {
    check_weight("contrastive_total", "image_text", w.image_text)?;
    check_weight("contrastive_total", "image_image", w.image_image)?;
    check_weight("contrastive_total", "text_text", w.text_text)?;
    weighted(g, &[(it, w.image_text), (ii, w.image_image), (tt, w.text_text)])
}

/// `λ_i·L_img + λ_t·L_txt`.
pub fn reconstruction_total<T: Real>(g: &mut Graph<T>, img: Var, txt: Var, lambda_i: f64, lambda_t: f64) -> Result<Var> {
    check_weight("reconstruction_total", "lambda_i", lambda_i)?;
    check_weight("reconstruction_total", "lambda_t", lambda_t)?;
    weighted(g, &[(img, lambda_i), (txt, lambda_t)])
}

/// `λ_c·L_cont + λ_r·L_recons`.
pub fn tulip_total<T: Real>(g: &mut Graph<T>, cont: Var, recons: Var, lambda_c: f64, lambda_r: f64) -> Result<Var> {
    check_weight("tulip_total", "lambda_c", lambda_c)?;
    check_weight("tulip_total", "lambda_r", lambda_r)?;
    weighted(g, &[(cont, lambda_c), (recons, lambda_r)])
}

/// Objective weights, used both to build the graph and to recombine logged components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_i: f64,
    pub lambda_t: f64,
    pub contrastive: ContrastiveWeights,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_r: 0.25,
            lambda_i: 1.0,
            lambda_t: 1.0,
            contrastive: ContrastiveWeights::default(),
        }
    }
}

impl ObjectiveWeights {
    /// Recombines plain loss values the same way the graph does.
    pub fn combine(&self, it: f64, ii: f64, tt: f64, img: f64, txt: f64) -> f64 {
        let c = self.contrastive;
        let cont = c.image_text * it + c.image_image * ii + c.text_text * tt;
        self.lambda_c * cont + self.lambda_r * (self.lambda_i * img + self.lambda_t * txt)
    }
}
