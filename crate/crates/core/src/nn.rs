//! Small composite building blocks on top of the tape primitives.

use crate::rng::RngStream;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// `x · w + b` with `w [in, out]`, `b [out]`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Rows scaled to unit L2 norm: `x / sqrt(Σx² + eps)`.
pub fn l2_normalize_rows<T: Scalar>(tape: &mut Tape<T>, x: Var, eps: f64) -> Result<Var, TensorError> {
    let rows = tape.shape(x)[0];
    let sq = tape.mul(x, x)?;
    let s = tape.sum(sq, 1)?;
    let s = tape.reshape(s, &[rows, 1])?;
    let s = if eps > 0.0 { tape.add_scalar(s, eps)? } else { s };
    let norm = tape.sqrt(s)?;
    tape.div(x, norm)
}

/// Inverted dropout: zeroes each element with probability `p` and scales
/// survivors by `1 / (1 - p)`.
pub fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut RngStream) -> Result<Var, TensorError> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = T::of(1.0 / (1.0 - p));
    let mask = (0..n)
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, m)
}
