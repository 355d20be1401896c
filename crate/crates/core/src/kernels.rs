//! Raw slice kernels shared by the tape's forward and backward rules.

use crate::error::{Error, Result};
use crate::tensor::strides;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numpy-style right-aligned broadcast of two shapes.
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
            _ => return Err(Error::dim(op, a, b)),
        };
    }
    Ok(out)
}

/// Maps a flat index in a broadcast output to the flat index of one operand.
pub(crate) enum BroadcastMap {
    Same,
    /// Operand shape is a trailing suffix of the output shape.
    Suffix(usize),
    General(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return BroadcastMap::Same;
        }
        if input.len() <= out.len() && out[out.len() - input.len()..] == *input {
            return BroadcastMap::Suffix(input.iter().product());
        }
        let rank = out.len();
        let in_strides = strides(input);
        // stride 0 along broadcast dimensions
        let eff: Vec<usize> = (0..rank)
            .map(|i| {
                if i + input.len() < rank {
                    return 0;
                }
                let j = i + input.len() - rank;
                if input[j] == 1 {
                    0
                } else {
                    in_strides[j]
                }
            })
            .collect();
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        BroadcastMap::General(map)
    }

    #[inline]
    pub(crate) fn get(&self, o: usize) -> usize {
        match self {
            BroadcastMap::Same => o,
            BroadcastMap::Suffix(n) => o % n,
            BroadcastMap::General(m) => m[o],
        }
    }
}

/// Permutes the axes of a row-major buffer: `out` axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // innermost axis handled as a strided run
    let inner = out_shape[rank - 1];
    let inner_stride = eff[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..n / inner {
        let mut o = off;
        for _ in 0..inner {
            out.push(data[o]);
            o += inner_stride;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c2);
        assert_eq!(c2, c);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut c3);
        assert_eq!(c3, c);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn general_map_matches_manual_indexing() {
        let out = [2, 3, 4];
        let input = [2, 1, 4];
        let map = BroadcastMap::new(&out, &input);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    let o = (a * 3 + b) * 4 + c;
                    assert_eq!(map.get(o), a * 4 + c);
                }
            }
        }
    }

    #[test]
    fn permute_swaps_axes() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (out, shape) = permute(&data, &[2, 3, 4], &[0, 2, 1]);
        assert_eq!(shape, vec![2, 4, 3]);
        // out[1, 3, 2] = in[1, 2, 3]
        assert_eq!(out[(4 + 3) * 3 + 2], data[(3 + 2) * 4 + 3]);
    }
}
