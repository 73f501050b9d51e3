use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

/// Name-keyed parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| invalid("params", format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| invalid("params", format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self { tensors }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Same names and shapes.
    pub fn same_layout<U: Real>(&self, other: &Params<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// Records every tensor as a leaf (`trainable`) or a constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.leaf(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Graph handles of a bound [`Params`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| invalid("params", format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Rebinds one name, e.g. to a leaf under test while the rest stay constant.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    /// Gradients of every bound tensor, zero where the output did not depend on it.
    pub fn gradients<T: Real>(&self, grads: &Gradients<T>) -> Result<Params<T>> {
        let mut out = Params::new();
        for (k, &v) in &self.vars {
            out.insert(k.clone(), grads.wrt(v).map_err(Error::from)?);
        }
        Ok(out)
    }
}

/// Seeded initializer; draws happen in call order, so the parameter set is a pure
/// function of the config and the seed.
pub(crate) struct Init {
    rng: crate::rng::Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: crate::rng::rng_for(&[seed, crate::rng::purpose::INIT]) }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    /// Xavier-uniform for a `[fan_in, fan_out]` weight.
    pub fn xavier<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        use rand::Rng as _;
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(vec![fan_in, fan_out], |_| T::of(rng.random_range(-a..a)))
    }
}

pub(crate) fn linear<T: Real>(p: &mut Params<T>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{name}.w"), init.xavier(fan_in, fan_out));
    p.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

pub(crate) fn norm<T: Real>(p: &mut Params<T>, name: &str, width: usize) {
    p.insert(format!("{name}.gain"), Tensor::full(vec![width], T::one()));
    p.insert(format!("{name}.bias"), Tensor::zeros(vec![width]));
}

pub(crate) fn block<T: Real>(p: &mut Params<T>, init: &mut Init, name: &str, width: usize, mlp_ratio: usize) {
    norm(p, &format!("{name}.norm1"), width);
    for proj in ["q", "k", "v", "o"] {
        linear(p, init, &format!("{name}.attn.{proj}"), width, width);
    }
    norm(p, &format!("{name}.norm2"), width);
    linear(p, init, &format!("{name}.mlp.fc1"), width, width * mlp_ratio);
    linear(p, init, &format!("{name}.mlp.fc2"), width * mlp_ratio, width);
}
