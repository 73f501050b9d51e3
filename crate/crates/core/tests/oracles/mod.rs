//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's algorithms; each oracle restates the rule
//! it checks in the most direct form available.
#![allow(dead_code)]

/// Direct double loop of `−(1/R) Σ_{z≠0} log(1/(1+exp(z(−t·x·y + b))))`.
pub fn siglip_double_loop(x: &[Vec<f64>], y: &[Vec<f64>], t: f64, b: f64, z: &[Vec<i8>]) -> f64 {
    let mut acc = 0.0;
    for (i, xi) in x.iter().enumerate() {
        for (j, yj) in y.iter().enumerate() {
            let zij = z[i][j] as f64;
            if zij == 0.0 {
                continue;
            }
            let dot: f64 = xi.iter().zip(yj).map(|(a, c)| a * c).sum();
            let e = zij * (-t * dot + b);
            // log(1/(1+exp(e))) = −softplus(e), written stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            acc -= softplus;
        }
    }
    -acc / x.len() as f64
}

/// Same-modality rule on index-aligned sides: start from all −1 and put +1 on
/// the diagonal of every non-negative view.
pub fn same_modality_aligned(n: usize, negative: &[bool]) -> Vec<Vec<i8>> {
    let mut z = vec![vec![-1i8; n]; n];
    for (i, row) in z.iter_mut().enumerate() {
        if !negative[i] {
            row[i] = 1;
        }
    }
    z
}

/// Cross-modal rule: XOR on same-sample pairs, masking of both-negative pairs, and
/// masking (or −1) of different-sample pairs that involve one negative.
pub fn cross_modal_rule(img: &[(u64, bool)], txt: &[(u64, bool)], mask_cross_sample: bool) -> Vec<Vec<i8>> {
    img.iter()
        .map(|&(si, ni)| {
            txt.iter()
                .map(|&(sj, nj)| {
                    if si == sj {
                        if ni && nj {
                            0
                        } else if ni ^ nj {
                            -1
                        } else {
                            1
                        }
                    } else if ni && nj {
                        0
                    } else if ni || nj {
                        if mask_cross_sample {
                            0
                        } else {
                            -1
                        }
                    } else {
                        -1
                    }
                })
                .collect()
        })
        .collect()
}

/// Deterministic unit vectors for tests, from a tiny LCG so oracles share no RNG code.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        (self.next_f64() * n as f64) as u64 % n
    }

    pub fn unit_rows(&mut self, rows: usize, d: usize) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| self.uniform(-1.0, 1.0)).collect();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.into_iter().map(|a| a / n).collect()
            })
            .collect()
    }
}

/// `θ_T(k)` under `k` EMA updates toward a fixed student, by plain recurrence.
pub fn ema_recurrence(teacher: &[f64], student: &[f64], m: f64, k: usize) -> Vec<f64> {
    let mut t = teacher.to_vec();
    for _ in 0..k {
        for (a, &s) in t.iter_mut().zip(student) {
            *a = m * *a + (1.0 - m) * s;
        }
    }
    t
}

/// One Adam step with decoupled weight decay, coded from the textbook update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
) {
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let mh = m[i] / (1.0 - beta1.powi(step));
        let vh = v[i] / (1.0 - beta2.powi(step));
        p[i] -= lr * (mh / (vh.sqrt() + eps) + wd * p[i]);
    }
}
