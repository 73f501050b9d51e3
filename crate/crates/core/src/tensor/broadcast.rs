use super::{numel, Result, TensorError};

/// Numpy-style broadcast of two shapes (aligned on trailing axes).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps flat indices of a broadcast output back to flat indices of one operand.
#[derive(Debug, Clone)]
pub(crate) enum IndexMap {
    Same,
    Scalar,
    /// Operand equals the trailing axes of the output.
    Suffix(usize),
    /// Operand equals the leading axes of the output, trailing axes are 1.
    Repeat(usize),
    General(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn new(operand: &[usize], out: &[usize]) -> Self {
        let n = numel(operand);
        if operand == out {
            return IndexMap::Same;
        }
        if n == 1 {
            return IndexMap::Scalar;
        }
        let rank = out.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, rank - operand.len())
            .chain(operand.iter().copied())
            .collect();
        if padded == out {
            return IndexMap::Same;
        }
        // Suffix: some leading axes are 1, all later axes match the output.
        let first_match = padded
            .iter()
            .zip(out)
            .position(|(p, o)| p == o && *p != 1)
            .unwrap_or(rank);
        if padded[..first_match].iter().all(|&d| d == 1) && padded[first_match..] == out[first_match..] {
            return IndexMap::Suffix(n);
        }
        // Repeat: leading axes match, trailing axes are 1.
        let split = padded
            .iter()
            .zip(out)
            .position(|(p, o)| p != o)
            .unwrap_or(rank);
        if padded[split..].iter().all(|&d| d == 1) {
            return IndexMap::Repeat(numel(&out[split..]));
        }
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..rank).rev() {
            strides[i] = if padded[i] == 1 { 0 } else { s };
            s *= padded[i];
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        IndexMap::General(map)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Same => i,
            IndexMap::Scalar => 0,
            IndexMap::Suffix(n) => i % n,
            IndexMap::Repeat(inner) => i / inner,
            IndexMap::General(map) => map[i],
        }
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Splits `shape` around `axis` into (outer, extent, inner) products.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1, 3], &[5, 1]).unwrap(), vec![4, 5, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn index_maps_agree_with_general_path() {
        let out = [2, 3, 4];
        for operand in [vec![3, 4], vec![4], vec![2, 1, 1], vec![2, 3, 1], vec![1, 3, 1], vec![2, 1, 4]] {
            let fast = IndexMap::new(&operand, &out);
            let padded: Vec<usize> = std::iter::repeat_n(1, 3 - operand.len()).chain(operand.clone()).collect();
            for i in 0..24 {
                let (a, b, c) = (i / 12, (i / 4) % 3, i % 4);
                let idx = [a, b, c];
                let mut flat = 0;
                for ax in 0..3 {
                    let v = if padded[ax] == 1 { 0 } else { idx[ax] };
                    flat = flat * padded[ax] + v;
                }
                assert_eq!(fast.get(i), flat, "operand {operand:?} index {i}");
            }
        }
    }
}
