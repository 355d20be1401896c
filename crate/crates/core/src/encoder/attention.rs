use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `T × T` additive mask: `0` where query `t` may attend to key `t'`, else `-inf`.
///
/// The open band for row `t` is `max(0, t - r) ..= t - 1`, plus `t` itself
/// when `include_self`. Without the self position the first row is always
/// empty, so `include_self = false` is rejected.
pub fn build_mask(len: usize, window: usize, include_self: bool) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::Config("mask window must be >= 1".into()));
    }
    if len == 0 {
        return Err(Error::Config("mask length must be >= 1".into()));
    }
    if !include_self {
        return Err(Error::Config(
            "strict-past mask leaves row 1 with no keys; set include_self".into(),
        ));
    }
    let mut data = vec![f64::NEG_INFINITY; len * len];
    for t in 0..len {
        let lo = t.saturating_sub(window);
        for j in lo..=t {
            data[t * len + j] = 0.0;
        }
    }
    Tensor::new(vec![len, len], data)
}

/// `softmax(Q·Kᵀ / √dk + mask) · V` over `[.., T, dk]` operands, built from
/// tape primitives. Cost is quadratic in `T`; the model's hot path is
/// [`Tape::banded_attention`], which this function serves as an oracle for.
///
/// Returns the output and the attention weights.
pub fn scaled_dot_attention<R: Rng + ?Sized>(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
    dropout: Option<(f64, &mut R)>,
) -> Result<(Var, Var)> {
    let rank = tape.shape(q).len();
    if rank < 2 {
        return Err(Error::Shape("attention operands need rank >= 2".into()));
    }
    let dk = tape.shape(q)[rank - 1];
    let kt = tape.transpose(k, rank - 2, rank - 1)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    if let Some(mask) = mask {
        scores = tape.add(scores, mask)?;
    }
    let weights = tape.softmax_last(scores)?;
    let dropped = match dropout {
        Some((p, rng)) => tape.dropout(weights, p, rng)?,
        None => weights,
    };
    Ok((tape.matmul(dropped, v)?, weights))
}
