use crate::error::{invalid, Result};
use crate::models::Params;
use crate::tensor::{Real, Tensor};

/// Parameters excluded from weight decay: the loss temperature and bias, and every
/// normalization gain and bias.
pub fn decays(name: &str) -> bool {
    !(name.starts_with("loss.") || name.contains(".norm"))
}

pub fn global_norm<T: Real>(grads: &Params<T>) -> f64 {
    grads.iter().map(|(_, t)| t.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Params<T>, max: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max {
        let s = T::of(max / norm);
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &Params<T>) -> Self {
        let mut m = Params::new();
        for (k, p) in params.iter() {
            m.insert(k.clone(), Tensor::zeros(p.shape().to_vec()));
        }
        Self { v: m.clone(), m, t: 0 }
    }

    /// Decoupled weight decay (`p ← p·(1 − lr·wd)`), then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(invalid("adam", "parameters, gradients and moments differ in layout"));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (ob1, ob2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let eps = T::of(cfg.eps);
        let shrink = T::of(1.0 - lr * cfg.weight_decay);
        let (sc1, sc2) = (T::of(1.0 / c1), T::of(1.0 / c2));
        let lr = T::of(lr);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?.data();
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + ob1 * gi;
            }
            let m = self.m.get(name)?.data();
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + ob2 * gi * gi;
            }
            let v = self.v.get(name)?.data();
            let decay = decays(name) && cfg.weight_decay != 0.0;
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                if decay {
                    *pi = *pi * shrink;
                }
                *pi = *pi - lr * (mi * sc1) / ((vi * sc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
