//! Dense interpolation: folds a `T × d` sequence into `M` weighted slots.
//!
//! Step `t` (1-based) sits at relative position `s = M·t/T` and contributes
//! to slot `m` with weight `(1 − |s − m| / M)²`. The weights are cached in a
//! `T × M` matrix so the whole fold is one batched matrix product.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct InterpWeights {
    len: usize,
    factor: usize,
    /// Row-major `len × factor`.
    w: Vec<f64>,
}

/// Weight of 1-based step `t` on 1-based slot `m`.
pub fn interp_weight(t: usize, m: usize, len: usize, factor: usize) -> f64 {
    let s = factor as f64 * t as f64 / len as f64;
    let base = 1.0 - (s - m as f64).abs() / factor as f64;
    if base <= 0.0 {
        0.0
    } else {
        base * base
    }
}

impl InterpWeights {
    pub fn build(len: usize, factor: usize) -> Result<Self> {
        if len == 0 || factor == 0 {
            return Err(Error::Config(format!(
                "dense interpolation needs T >= 1 and M >= 1 (T={len}, M={factor})"
            )));
        }
        if factor > len {
            return Err(Error::Config(format!(
                "interpolation factor M={factor} exceeds sequence length T={len}"
            )));
        }
        let mut w = Vec::with_capacity(len * factor);
        for t in 1..=len {
            for m in 1..=factor {
                w.push(interp_weight(t, m, len, factor));
            }
        }
        Ok(Self { len, factor, w })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Weight at 0-based `(t, m)`.
    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.w[t * self.factor + m]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len, self.factor], self.w.clone()).expect("len × factor")
    }

    /// `M × T` transpose, the left operand of the fold.
    fn transposed(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.w.len()];
        for t in 0..self.len {
            for m in 0..self.factor {
                out[m * self.len + t] = self.w[t * self.factor + m];
            }
        }
        out
    }
}

/// `[B, T, d] → [B, M·d]`; slot `m` occupies columns `m·d .. (m+1)·d`.
pub fn dense_interpolate(tape: &mut Tape, seq: Var, weights: &InterpWeights) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 || shape[1] != weights.len {
        return Err(Error::dim(
            "dense_interpolate",
            &shape,
            &[weights.len, weights.factor],
        ));
    }
    let wt = tape.constant(Tensor::new(vec![weights.factor, weights.len], weights.transposed())?);
    fold(tape, seq, wt, shape[0], weights.factor, shape[2])
}

/// Like [`dense_interpolate`] for a padded batch: row `b` is interpolated over
/// its first `lengths[b]` steps only, with its own `T = lengths[b]` weights.
pub fn dense_interpolate_padded(
    tape: &mut Tape,
    seq: Var,
    lengths: &[usize],
    factor: usize,
) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() == 3 && lengths.len() == shape[0] && lengths.iter().all(|&l| l == shape[1]) {
        return dense_interpolate(tape, seq, &InterpWeights::build(shape[1], factor)?);
    }
    padded(tape, seq, lengths, factor, |_| 1.0)
}

/// [`dense_interpolate_padded`] scaled by `factor / len` per sequence, so
/// the output magnitude does not grow with sequence length.
pub fn dense_interpolate_normalized(
    tape: &mut Tape,
    seq: Var,
    lengths: &[usize],
    factor: usize,
) -> Result<Var> {
    padded(tape, seq, lengths, factor, |len| factor as f64 / len as f64)
}

fn padded(
    tape: &mut Tape,
    seq: Var,
    lengths: &[usize],
    factor: usize,
    scale: impl Fn(usize) -> f64,
) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 || lengths.len() != shape[0] {
        return Err(Error::dim("dense_interpolate", &shape, &[lengths.len()]));
    }
    let (bsz, t, d) = (shape[0], shape[1], shape[2]);
    let mut wt = vec![0.0; bsz * factor * t];
    for (b, &len) in lengths.iter().enumerate() {
        if len > t {
            return Err(Error::Shape(format!("length {len} exceeds padded T={t}")));
        }
        let w = InterpWeights::build(len, factor)?;
        let c = scale(len);
        for m in 0..factor {
            for ti in 0..len {
                wt[(b * factor + m) * t + ti] = c * w.get(ti, m);
            }
        }
    }
    let wt = tape.constant(Tensor::new(vec![bsz, factor, t], wt)?);
    fold(tape, seq, wt, bsz, factor, d)
}

fn fold(tape: &mut Tape, seq: Var, wt: Var, bsz: usize, factor: usize, d: usize) -> Result<Var> {
    let u = tape.matmul(wt, seq)?;
    tape.reshape(u, &[bsz, factor * d])
}
