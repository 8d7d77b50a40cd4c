//! Single-token Jacobian of an MoE layer and its split into an expert term
//! (routing gates held at their probe-point values) and a routing residual.
//!
//! `J` and `J_expert` come from central differences; `R = J - J_expert`.
//! For a plain layer the residual is spanned by the router's expert
//! embeddings, so its numerical rank is at most `N`. With a fixed noise
//! draw the two-path layer adds a second routing term, bounding the rank
//! by `2N`. The blend gate is held fixed in `J_expert`, so its
//! contribution also lands in `R`.

use std::fmt;

use nalgebra::DMatrix;

use super::DiagnosticsError;
use crate::moe::MoeLayer;
use crate::routing::RouterDecision;
use crate::stochastic::{Mode, NoiseSource};
use crate::tensor::{Tape, Tensor, Var};

/// Smallest top-k probability gap accepted at a probe point.
pub const MIN_GAP: f64 = 1e-3;
/// Singular values at or below `RANK_RTOL · σ_max` count as zero.
pub const RANK_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    pub d: usize,
    pub n_experts: usize,
    pub two_path: bool,
    /// Row-major `[d_out, d_in]`.
    pub j: Vec<f64>,
    pub j_expert: Vec<f64>,
    pub r: Vec<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub tolerance: f64,
    /// Autodiff `J` against the finite-difference `J`.
    pub autodiff_rel_err: f64,
    pub min_gap: f64,
}

/// Per-layer evaluation frozen at a probe point.
struct Frozen {
    clean: RouterDecision,
    noisy: Option<RouterDecision>,
    gate: f64,
}

fn two_path(layer: &MoeLayer<f64>) -> Result<bool, DiagnosticsError> {
    match layer.stochastic.as_ref().map(|s| &s.noise) {
        None | Some(NoiseSource::Off) => Ok(false),
        Some(NoiseSource::Fixed(_)) => Ok(true),
        Some(NoiseSource::Sampled) => Err(DiagnosticsError::BadProbe(
            "sampled noise makes the layer non-deterministic; use a fixed draw or switch noise off".into(),
        )),
    }
}

fn layer_out(layer: &mut MoeLayer<f64>, tape: &mut Tape<f64>, x: Var, k: usize, two: bool) -> Result<Var, DiagnosticsError> {
    let mode = if two { Mode::Train } else { Mode::Eval };
    Ok(layer.forward(tape, x, mode, k)?.y)
}

fn eval_full(layer: &mut MoeLayer<f64>, x: &[f64], k: usize, two: bool) -> Result<Vec<f64>, DiagnosticsError> {
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(&[1, x.len()], x.to_vec())?);
    let y = layer_out(layer, &mut tape, xv, k, two)?;
    Ok(tape.value(y).to_f64())
}

fn eval_fixed(layer: &mut MoeLayer<f64>, x: &[f64], frozen: &Frozen) -> Result<Vec<f64>, DiagnosticsError> {
    let d = x.len();
    let n = layer.n_experts();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(&[1, d], x.to_vec())?);
    let pc = tape.constant(Tensor::new(&[1, n], frozen.clean.probs.clone())?);
    let (yc, _) = layer.experts.combine(&mut tape, xv, &frozen.clean, pc)?;
    let Some(noisy) = &frozen.noisy else {
        return Ok(tape.value(yc).to_f64());
    };
    let xh = layer
        .stochastic
        .as_mut()
        .expect("two-path probe")
        .noisy_input(&mut tape, xv)
        .map_err(crate::moe::MoeError::from)?;
    let ph = tape.constant(Tensor::new(&[1, n], noisy.probs.clone())?);
    let (yh, _) = layer.experts.combine(&mut tape, xh, noisy, ph)?;
    let g = frozen.gate;
    Ok(tape
        .value(yc)
        .to_f64()
        .iter()
        .zip(tape.value(yh).to_f64())
        .map(|(c, h)| g * c + (1.0 - g) * h)
        .collect())
}

fn central_diff<F>(x: &[f64], eps: f64, mut f: F) -> Result<Vec<f64>, DiagnosticsError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, DiagnosticsError>,
{
    let d = x.len();
    let mut j = vec![0.0; d * d];
    let mut p = x.to_vec();
    for c in 0..d {
        p[c] = x[c] + eps;
        let plus = f(&p)?;
        p[c] = x[c] - eps;
        let minus = f(&p)?;
        p[c] = x[c];
        for r in 0..d {
            j[r * d + c] = (plus[r] - minus[r]) / (2.0 * eps);
        }
    }
    Ok(j)
}

/// Reverse-mode Jacobian, one backward pass per output coordinate.
fn autodiff_jacobian(layer: &mut MoeLayer<f64>, x: &[f64], k: usize, two: bool) -> Result<Vec<f64>, DiagnosticsError> {
    let d = x.len();
    let mut j = vec![0.0; d * d];
    for r in 0..d {
        let mut tape = Tape::new();
        let xv = tape.param(Tensor::new(&[1, d], x.to_vec())?);
        let y = layer_out(layer, &mut tape, xv, k, two)?;
        let yr = tape.take(y, &[r], &[1])?;
        tape.backward(yr)?;
        if let Some(g) = tape.grad(xv) {
            j[r * d..(r + 1) * d].copy_from_slice(g.data());
        }
    }
    Ok(j)
}

/// Singular values (descending) and numerical rank at `RANK_RTOL · σ_max`.
pub fn numerical_rank(m: &[f64], rows: usize, cols: usize) -> (Vec<f64>, usize, f64) {
    let mat = DMatrix::from_row_slice(rows, cols, m);
    let mut sv: Vec<f64> = mat.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let tol = RANK_RTOL * sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > tol).count();
    (sv, rank, tol)
}

/// Probes `layer` at the single token `x` with top-`k` routing.
///
/// Noise must be off (clean branch) or a fixed draw of shape `[1, d]`
/// (full two-path layer).
pub fn jacobian_probe(layer: &mut MoeLayer<f64>, x: &[f64], k: usize, eps: f64) -> Result<JacobianReport, DiagnosticsError> {
    if !(eps > 0.0) {
        return Err(DiagnosticsError::BadProbe(format!("epsilon must be positive, got {eps}")));
    }
    let d = x.len();
    let two = two_path(layer)?;
    let saved = layer.counters;

    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(&[1, d], x.to_vec())?);
    let mode = if two { Mode::Train } else { Mode::Eval };
    let out = layer.forward(&mut tape, xv, mode, k)?;
    let frozen = Frozen {
        clean: out.clean.decision.clone(),
        noisy: out.noisy.as_ref().map(|r| r.decision.clone()),
        gate: out.gate.map_or(1.0, |g| tape.value(g).item()),
    };
    let min_gap = frozen
        .noisy
        .iter()
        .map(RouterDecision::min_boundary_gap)
        .fold(frozen.clean.min_boundary_gap(), f64::min);
    if min_gap <= MIN_GAP {
        layer.counters = saved;
        return Err(DiagnosticsError::Boundary { gap: min_gap, min: MIN_GAP });
    }

    let j = central_diff(x, eps, |p| eval_full(layer, p, k, two))?;
    let j_expert = central_diff(x, eps, |p| eval_fixed(layer, p, &frozen))?;
    let r: Vec<f64> = j.iter().zip(&j_expert).map(|(a, b)| a - b).collect();
    let (singular_values, rank, tolerance) = numerical_rank(&r, d, d);
    let ad = autodiff_jacobian(layer, x, k, two)?;
    layer.counters = saved;

    let scale = j.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(1e-12);
    let autodiff_rel_err = ad
        .iter()
        .zip(&j)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);

    Ok(JacobianReport {
        d,
        n_experts: layer.n_experts(),
        two_path: two,
        j,
        j_expert,
        r,
        singular_values,
        rank,
        tolerance,
        autodiff_rel_err,
        min_gap,
    })
}

impl fmt::Display for JacobianReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fro = |m: &[f64]| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        writeln!(f, "[jacobian]")?;
        writeln!(f, "d = {}", self.d)?;
        writeln!(f, "experts = {}", self.n_experts)?;
        writeln!(f, "two_path = {}", self.two_path)?;
        writeln!(f, "min_topk_gap = {:.6e}", self.min_gap)?;
        writeln!(f, "norm_j = {:.6e}", fro(&self.j))?;
        writeln!(f, "norm_j_expert = {:.6e}", fro(&self.j_expert))?;
        writeln!(f, "norm_r = {:.6e}", fro(&self.r))?;
        writeln!(f, "rank_r = {}", self.rank)?;
        writeln!(f, "rank_bound = {}", if self.two_path { 2 * self.n_experts } else { self.n_experts })?;
        writeln!(f, "rank_tolerance = {:.6e}", self.tolerance)?;
        let sv: Vec<String> = self
            .singular_values
            .iter()
            .take(2 * self.n_experts + 2)
            .map(|s| format!("{s:.3e}"))
            .collect();
        writeln!(f, "leading_singular_values = {}", sv.join(" "))?;
        writeln!(f, "autodiff_vs_fd_rel_err = {:.3e}", self.autodiff_rel_err)
    }
}
