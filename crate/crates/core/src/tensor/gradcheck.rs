//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("function is non-finite when coordinate {index} is perturbed")]
    NonFinite { index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn eval<F>(f: &mut F, point: &Tensor<f64>) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    tape.set_nan_guard(false);
    let x = tape.constant(point.clone());
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()).into());
    }
    Ok(v.item())
}

/// Analytic gradient of `f` at `point` (zeros when `f` ignores its input).
pub fn analytic_grad<F>(f: &mut F, point: &Tensor<f64>) -> Result<Tensor<f64>, GradCheckError>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    if !tape.requires_grad(y) {
        return Ok(Tensor::zeros(point.shape()));
    }
    tape.backward(y)?;
    Ok(tape
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape())))
}

/// Central-difference gradient of `f` at `point`.
pub fn numeric_grad<F>(f: &mut F, point: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>, GradCheckError>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    if !(eps > 0.0) {
        return Err(GradCheckError::BadEpsilon(eps));
    }
    let mut out = Tensor::zeros(point.shape());
    let mut p = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        p.data_mut()[i] = x0 + eps;
        let up = eval(f, &p)?;
        p.data_mut()[i] = x0 - eps;
        let down = eval(f, &p)?;
        p.data_mut()[i] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(GradCheckError::NonFinite { index: i });
        }
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Largest coordinate-wise relative error between the tape gradient and
/// central differences: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut f: F, point: &Tensor<f64>, eps: f64) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let numeric = numeric_grad(&mut f, point, eps)?;
    let analytic = analytic_grad(&mut f, point)?;
    Ok(max_rel_error(analytic.data(), numeric.data()))
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
