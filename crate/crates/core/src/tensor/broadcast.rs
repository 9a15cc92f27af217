//! Singleton-dimension broadcasting for equal-rank operands.

use crate::error::{Error, Result};

/// Output shape of broadcasting `a` against `b`. Ranks must agree; each
/// dimension must be equal or 1 on one side.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape("broadcast", format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape("broadcast", format!("{a:?} vs {b:?}"))),
        })
        .collect()
}

/// Row-major strides of `src` read through `out`, with 0 on expanded axes.
pub(crate) fn expanded_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; src.len()];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        strides[d] = if src[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= src[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
pub(crate) fn for_each_pair(
    out: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ai, bi);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += a_strides[d];
            bi += b_strides[d];
            if idx[d] < out[d] {
                break;
            }
            ai -= a_strides[d] * out[d];
            bi -= b_strides[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 1, 1], &[2, 3, 4, 4]).unwrap(), vec![2, 3, 4, 4]);
        assert_eq!(broadcast_shape(&[1, 3], &[2, 1]).unwrap(), vec![2, 3]);
        assert!(broadcast_shape(&[2, 3], &[3, 3]).is_err());
        assert!(broadcast_shape(&[3], &[1, 3]).is_err());
    }

    #[test]
    fn pair_walk_expands_singletons() {
        let out = [2, 3];
        let a = expanded_strides(&[2, 1], &out);
        let b = expanded_strides(&[1, 3], &out);
        let mut seen = Vec::new();
        for_each_pair(&out, &a, &b, |o, i, j| seen.push((o, i, j)));
        assert_eq!(seen, vec![(0, 0, 0), (1, 0, 1), (2, 0, 2), (3, 1, 0), (4, 1, 1), (5, 1, 2)]);
    }
}
