//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the taped gradient of `f` at `x` against central differences.
///
/// Returns the largest elementwise relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`. `f` must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let err = (a - numeric).abs() / denom;
        if !err.is_finite() {
            return Err(Error::Contract(format!("non-finite gradient error at element {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
