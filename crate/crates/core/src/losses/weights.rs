use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Per-index bookkeeping for one side of a pairwise loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub modality: Modality,
    pub negative: Vec<bool>,
    pub source: Vec<u64>,
}

impl Provenance {
    pub fn new(modality: Modality, negative: Vec<bool>, source: Vec<u64>) -> Result<Self> {
        if negative.len() != source.len() {
            return Err(Error::LengthMismatch {
                op: "provenance",
                left: negative.len(),
                right: source.len(),
            });
        }
        Ok(Self { modality, negative, source })
    }

    /// Index `i` comes from sample `i`; `negative` flags the hard negatives.
    pub fn aligned(modality: Modality, negative: Vec<bool>) -> Self {
        let source = (0..negative.len() as u64).collect();
        Self { modality, negative, source }
    }

    pub fn originals(modality: Modality, n: usize) -> Self {
        Self::aligned(modality, vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.negative.is_empty()
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.negative.len() != self.source.len() {
            return Err(Error::LengthMismatch {
                op,
                left: self.negative.len(),
                right: self.source.len(),
            });
        }
        if self.is_empty() {
            return Err(crate::error::invalid(op, "empty side"));
        }
        Ok(())
    }

    /// Concatenates two provenances of the same modality.
    pub fn extend(&mut self, other: &Provenance) {
        self.negative.extend_from_slice(&other.negative);
        self.source.extend_from_slice(&other.source);
    }
}

/// What happens to a cross-modal pair of different samples when either side is negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossSampleNegatives {
    #[default]
    Mask,
    Negative,
}

/// Rows × columns matrix of pair weights in {+1, −1, 0}.
#[derive(Clone, PartialEq, Eq)]
pub struct PairWeights {
    rows: usize,
    cols: usize,
    z: Vec<i8>,
}

impl fmt::Debug for PairWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "PairWeights {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| format!("{:+}", self.get(r, c))).collect();
            writeln!(f, "  [{}]", row.join(" "))?;
        }
        Ok(())
    }
}

impl PairWeights {
    pub fn new(rows: usize, cols: usize, z: Vec<i8>) -> Result<Self> {
        if rows * cols != z.len() || rows == 0 || cols == 0 {
            return Err(crate::error::invalid("pair_weights", format!("{rows}x{cols} with {} entries", z.len())));
        }
        if let Some(bad) = z.iter().find(|v| !matches!(v, -1..=1)) {
            return Err(crate::error::invalid("pair_weights", format!("entry {bad} not in {{-1,0,1}}")));
        }
        Ok(Self { rows, cols, z })
    }

    /// Diagonal +1, off-diagonal −1.
    pub fn standard(n: usize) -> Self {
        let z = (0..n * n).map(|k| if k / n == k % n { 1 } else { -1 }).collect();
        Self { rows: n, cols: n, z }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.z[r * self.cols + c]
    }

    pub fn entries(&self) -> &[i8] {
        &self.z
    }

    pub fn as_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([self.rows, self.cols], |k| T::of(self.z[k] as f64))
    }

    /// True where the pair is ignored.
    pub fn zero_mask(&self) -> Mask {
        Mask::new([self.rows, self.cols], self.z.iter().map(|&v| v == 0).collect()).expect("shape matches")
    }

    pub fn count(&self, value: i8) -> usize {
        self.z.iter().filter(|&&v| v == value).count()
    }

    /// Applies `perm` to rows and `perm_cols` to columns: entry (i, j) of the result is
    /// entry (perm[i], perm_cols[j]) of `self`.
    pub fn permuted(&self, perm: &[usize], perm_cols: &[usize]) -> Self {
        let z = perm
            .iter()
            .flat_map(|&r| perm_cols.iter().map(move |&c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        Self { rows: perm.len(), cols: perm_cols.len(), z }
    }
}

/// Weights for two views of the same modality (image-image or text-text).
///
/// Same sample and neither view negative: +1. Same sample with a negative view on either
/// side: −1. Different samples: −1. For aligned square inputs this is the standard
/// diagonal/off-diagonal matrix with the diagonal flipped to −1 wherever the view is negative.
pub fn same_modality(x: &Provenance, y: &Provenance) -> Result<PairWeights> {
    x.validate("same_modality")?;
    y.validate("same_modality")?;
    if x.modality != y.modality {
        return Err(crate::error::invalid("same_modality", "sides have different modalities"));
    }
    let mut z = Vec::with_capacity(x.len() * y.len());
    for i in 0..x.len() {
        for j in 0..y.len() {
            let w = if x.source[i] == y.source[j] && !x.negative[i] && !y.negative[j] { 1 } else { -1 };
            z.push(w);
        }
    }
    PairWeights::new(x.len(), y.len(), z)
}

/// Weights for image rows against text columns.
///
/// Same sample: +1 if neither side is negative, −1 if exactly one is. Both negative: 0.
/// Different samples: −1 if neither is negative, exactly one negative is decided by `policy`.
pub fn cross_modal(img: &Provenance, txt: &Provenance, policy: CrossSampleNegatives) -> Result<PairWeights> {
    img.validate("cross_modal")?;
    txt.validate("cross_modal")?;
    if img.modality == txt.modality {
        return Err(crate::error::invalid("cross_modal", "sides share a modality"));
    }
    let (si, st): (BTreeSet<u64>, BTreeSet<u64>) = (img.source.iter().copied().collect(), txt.source.iter().copied().collect());
    if let Some(&id) = si.symmetric_difference(&st).next() {
        return Err(Error::UnmatchedSource { op: "cross_modal", source_id: id });
    }
    let mut z = Vec::with_capacity(img.len() * txt.len());
    for i in 0..img.len() {
        for j in 0..txt.len() {
            let (ni, nj) = (img.negative[i], txt.negative[j]);
            let w = if ni && nj {
                0
            } else if img.source[i] == txt.source[j] {
                if ni || nj {
                    -1
                } else {
                    1
                }
            } else if !ni && !nj {
                -1
            } else {
                match policy {
                    CrossSampleNegatives::Mask => 0,
                    CrossSampleNegatives::Negative => -1,
                }
            };
            z.push(w);
        }
    }
    PairWeights::new(img.len(), txt.len(), z)
}
