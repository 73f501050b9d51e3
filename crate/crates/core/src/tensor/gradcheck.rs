//! Central finite-difference verification of `Graph::backward`.

use super::{Graph, Tensor, TensorError, Var};

/// Floor of the relative-error denominator `max(|analytic|, |numeric|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, coordinate)` where the worst relative error occurred.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    /// Folds another report into this one (worst case wins).
    pub fn merge(&mut self, other: &FdReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

/// Roundoff a central difference of `f` can pick up, taking 64 ulps of accumulated
/// error in each evaluation.
pub const ROUNDOFF_ULPS: f64 = 64.0;

pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_with_floor(a, b, REL_ERROR_FLOOR)
}

pub fn relative_error_with_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for a check at `f(x) = fx`: gradients smaller than the differencing
/// noise divided by the tolerance cannot be resolved, so those coordinates are held to
/// an absolute error of about that noise instead.
pub fn resolution_floor(fx: f64, opts: &FdOptions) -> f64 {
    let noise = ROUNDOFF_ULPS * f64::EPSILON * fx.abs().max(1.0) / opts.step;
    (noise / opts.tolerance).max(REL_ERROR_FLOOR)
}

fn evaluate<F, E>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarOutput(v.shape().to_vec()).into());
    }
    Ok(v.item())
}

fn coordinates(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares `backward()` against `(f(x+h) - f(x-h)) / 2h` for every input coordinate.
///
/// `f` builds a scalar from the supplied leaves. It is evaluated twice up front and must
/// produce bitwise-identical values, otherwise [`TensorError::NonDeterministic`] is returned.
pub fn finite_difference_check<F, E>(f: F, inputs: &[Tensor<f64>], opts: &FdOptions) -> Result<FdReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if opts.step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(TensorError::Invalid {
            op: "finite_difference_check",
            msg: format!("step must be positive, got {}", opts.step),
        }
        .into());
    }
    let first = evaluate(&f, inputs)?;
    let second = evaluate(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic.into());
    }

    let floor = resolution_floor(first, opts);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = FdReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
        tolerance: opts.tolerance,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var)?;
        for coord in coordinates(inputs[which].numel(), opts.max_coords) {
            let x0 = inputs[which].data()[coord];
            probe[which].data_mut()[coord] = x0 + opts.step;
            let plus = evaluate(&f, &probe)?;
            probe[which].data_mut()[coord] = x0 - opts.step;
            let minus = evaluate(&f, &probe)?;
            probe[which].data_mut()[coord] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[coord];
            let rel = relative_error_with_floor(a, numeric, floor);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((which, coord));
                report.worst_values = Some((a, numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

type Builder = fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Inputs are drawn from `lo..hi`.
    range: (f64, f64),
    build: Builder,
}

/// Contracts an arbitrary-shaped output with fixed pseudo-random weights so that
/// every output coordinate contributes a distinct amount to the scalar.
fn contract(g: &mut Graph<f64>, y: Var) -> Result<Var, TensorError> {
    let w = Tensor::from_fn(g.shape(y).to_vec(), |k| ((k as f64 + 1.0) * 0.618_033_988_75).fract() * 2.0 - 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", shapes: &[&[3, 4], &[4, 5]], range: (-1.0, 1.0), build: |g, v| { let y = g.matmul(v[0], v[1])?; contract(g, y) } },
        Case { name: "matmul_batched", shapes: &[&[2, 3, 4], &[2, 4, 2]], range: (-1.0, 1.0), build: |g, v| { let y = g.matmul(v[0], v[1])?; contract(g, y) } },
        Case { name: "add", shapes: &[&[3, 4], &[4]], range: (-1.0, 1.0), build: |g, v| { let y = g.add(v[0], v[1])?; contract(g, y) } },
        Case { name: "sub", shapes: &[&[2, 3, 1], &[3, 4]], range: (-1.0, 1.0), build: |g, v| { let y = g.sub(v[0], v[1])?; contract(g, y) } },
        Case { name: "mul", shapes: &[&[3, 4], &[3, 1]], range: (-1.0, 1.0), build: |g, v| { let y = g.mul(v[0], v[1])?; contract(g, y) } },
        Case { name: "scale", shapes: &[&[5]], range: (-1.0, 1.0), build: |g, v| { let y = g.scale(v[0], -1.7)?; contract(g, y) } },
        Case { name: "exp", shapes: &[&[2, 3]], range: (-2.0, 2.0), build: |g, v| { let y = g.exp(v[0])?; contract(g, y) } },
        Case { name: "log", shapes: &[&[2, 3]], range: (0.2, 3.0), build: |g, v| { let y = g.log(v[0])?; contract(g, y) } },
        Case { name: "sigmoid", shapes: &[&[2, 3]], range: (-4.0, 4.0), build: |g, v| { let y = g.sigmoid(v[0])?; contract(g, y) } },
        Case { name: "log_sigmoid", shapes: &[&[2, 3]], range: (-6.0, 6.0), build: |g, v| { let y = g.log_sigmoid(v[0])?; contract(g, y) } },
        Case { name: "gelu", shapes: &[&[2, 3]], range: (-3.0, 3.0), build: |g, v| { let y = g.gelu(v[0])?; contract(g, y) } },
        Case { name: "softmax", shapes: &[&[3, 4]], range: (-2.0, 2.0), build: |g, v| { let y = g.softmax(v[0], 1)?; contract(g, y) } },
        Case { name: "softmax_axis0", shapes: &[&[3, 2, 2]], range: (-2.0, 2.0), build: |g, v| { let y = g.softmax(v[0], 0)?; contract(g, y) } },
        Case { name: "log_softmax", shapes: &[&[3, 4]], range: (-2.0, 2.0), build: |g, v| { let y = g.log_softmax(v[0], 1)?; contract(g, y) } },
        Case { name: "layer_norm", shapes: &[&[3, 5]], range: (-2.0, 2.0), build: |g, v| { let y = g.layer_norm(v[0], 1e-6)?; contract(g, y) } },
        Case { name: "l2_normalize", shapes: &[&[3, 4]], range: (-2.0, 2.0), build: |g, v| { let y = g.l2_normalize(v[0])?; contract(g, y) } },
        Case { name: "sum", shapes: &[&[2, 3, 4]], range: (-1.0, 1.0), build: |g, v| { let y = g.sum(v[0], 1, false)?; contract(g, y) } },
        Case { name: "mean", shapes: &[&[2, 3, 4]], range: (-1.0, 1.0), build: |g, v| { let y = g.mean(v[0], 2, true)?; contract(g, y) } },
        Case { name: "sum_all", shapes: &[&[2, 3]], range: (-1.0, 1.0), build: |g, v| { let y = g.mul(v[0], v[0])?; g.sum_all(y) } },
        Case { name: "mean_all", shapes: &[&[2, 3]], range: (-1.0, 1.0), build: |g, v| { let y = g.mul(v[0], v[0])?; g.mean_all(y) } },
        Case { name: "reshape", shapes: &[&[2, 6]], range: (-1.0, 1.0), build: |g, v| { let y = g.reshape(v[0], &[3, 4])?; contract(g, y) } },
        Case { name: "transpose", shapes: &[&[2, 3, 4]], range: (-1.0, 1.0), build: |g, v| { let y = g.transpose(v[0], 0, 2)?; contract(g, y) } },
        Case { name: "concat", shapes: &[&[2, 3], &[2, 1]], range: (-1.0, 1.0), build: |g, v| { let y = g.concat(&[v[0], v[1], v[0]], 1)?; contract(g, y) } },
        Case { name: "gather_rows", shapes: &[&[4, 3]], range: (-1.0, 1.0), build: |g, v| { let y = g.gather_rows(v[0], &[3, 0, 3, 1])?; contract(g, y) } },
        Case { name: "masked_fill", shapes: &[&[2, 3, 3]], range: (-1.0, 1.0), build: |g, v| { let y = g.masked_fill(v[0], &super::Mask::causal(3), -1e9)?; let y = g.softmax(y, 2)?; contract(g, y) } },
    ]
}

/// Runs the finite-difference check on every registered primitive, `trials` random
/// inputs each, returning the worst report per primitive.
pub fn primitive_suite(trials: usize, seed: u64, opts: &FdOptions) -> Result<Vec<(&'static str, FdReport)>, TensorError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if trials == 0 {
        return Ok(out);
    }
    for case in cases() {
        let mut worst: Option<FdReport> = None;
        for _ in 0..trials {
            let inputs: Vec<Tensor<f64>> = case
                .shapes
                .iter()
                .map(|s| Tensor::from_fn(s.to_vec(), |_| rng.random_range(case.range.0..case.range.1)))
                .collect();
            let report = finite_difference_check(case.build, &inputs, opts)?;
            match worst.as_mut() {
                Some(w) => w.merge(&report),
                None => worst = Some(report),
            }
        }
        out.push((case.name, worst.expect("trials > 0")));
    }
    Ok(out)
}
