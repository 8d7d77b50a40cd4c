//! Representation-collapse indicators: expert similarity, router entropy
//! and expert load.

use std::fmt;

use super::DiagnosticsError;
use crate::experts::Experts;
use crate::model::LanguageModel;
use crate::routing::RouterDecision;
use crate::stochastic::Mode;
use crate::tensor::{Scalar, Tape, Tensor};

pub const MIN_TOKENS: usize = 64;

/// Mean over tokens of the routing entropy `-Σ p ln p` (nats).
pub fn router_entropy(decision: &RouterDecision) -> f64 {
    if decision.tokens == 0 {
        return 0.0;
    }
    let total: f64 = decision
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    total / decision.tokens as f64
}

/// Number of (token, slot) selections per expert.
pub fn load_counts(decision: &RouterDecision) -> Vec<u64> {
    let mut c = vec![0u64; decision.n_experts];
    for &i in &decision.indices {
        c[i] += 1;
    }
    c
}

/// Gini coefficient `Σ_ij |x_i - x_j| / (2 n² mean)`; 0 for an even load.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let sum: f64 = values.iter().sum();
    if values.is_empty() || sum == 0.0 {
        return 0.0;
    }
    let diff: f64 = values
        .iter()
        .flat_map(|a| values.iter().map(move |b| (a - b).abs()))
        .sum();
    diff / (2.0 * n * sum)
}

pub fn load_gini(decision: &RouterDecision) -> f64 {
    let c: Vec<f64> = load_counts(decision).into_iter().map(|v| v as f64).collect();
    gini(&c)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Mean pairwise cosine between the outputs of all experts evaluated on the
/// same rows `x [M, d]`, averaged over rows and expert pairs.
pub fn expert_output_cosine<T: Scalar>(experts: &mut Experts<T>, x: &Tensor<T>) -> Result<f64, DiagnosticsError> {
    let n = experts.len();
    let d = x.shape()[x.shape().len() - 1];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let y = experts.expert_forward(&mut tape, xv, i)?;
        outs.push(tape.value(y).to_f64());
    }
    let rows = x.len() / d;
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..rows {
        for i in 0..n {
            for j in i + 1..n {
                let a = &outs[i][r * d..(r + 1) * d];
                let b = &outs[j][r * d..(r + 1) * d];
                sum += cosine(a, b);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 1.0 } else { sum / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CollapseReport {
    pub tokens: usize,
    pub mean_cosine: f64,
    pub layer_cosine: Vec<f64>,
    pub router_entropy: f64,
    pub layer_entropy: Vec<f64>,
    /// Per layer, selections per expert.
    pub load: Vec<Vec<u64>>,
    pub load_gini: f64,
    /// Optional `(k, bpc)` sweep filled in by the caller.
    pub bpc_by_k: Vec<(usize, f64)>,
}

/// Eval-mode forward over `tokens`, then per layer: expert-output cosine on
/// the MoE inputs, router entropy and load histogram.
pub fn collapse_metrics<T: Scalar>(
    model: &mut LanguageModel<T>,
    tokens: &[usize],
    batch: usize,
) -> Result<CollapseReport, DiagnosticsError> {
    if tokens.len() < MIN_TOKENS {
        return Err(DiagnosticsError::TooFewTokens {
            got: tokens.len(),
            need: MIN_TOKENS,
        });
    }
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, tokens, batch, Mode::Eval)?;
    let mut rep = CollapseReport {
        tokens: tokens.len(),
        ..Default::default()
    };
    for (layer, block) in out.layers.iter().zip(model.blocks.iter_mut()) {
        let x = tape.value(layer.input).clone();
        rep.layer_cosine.push(expert_output_cosine(&mut block.moe.experts, &x)?);
        rep.layer_entropy.push(router_entropy(&layer.clean.decision));
        rep.load.push(load_counts(&layer.clean.decision));
    }
    let n = rep.layer_cosine.len() as f64;
    rep.mean_cosine = rep.layer_cosine.iter().sum::<f64>() / n;
    rep.router_entropy = rep.layer_entropy.iter().sum::<f64>() / n;
    rep.load_gini = rep
        .load
        .iter()
        .map(|c| gini(&c.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .sum::<f64>()
        / n;
    Ok(rep)
}

impl fmt::Display for CollapseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[collapse]")?;
        writeln!(f, "tokens = {}", self.tokens)?;
        writeln!(f, "mean_expert_cosine = {:.6}", self.mean_cosine)?;
        writeln!(f, "router_entropy = {:.6}", self.router_entropy)?;
        writeln!(f, "load_gini = {:.6}", self.load_gini)?;
        for (l, ((c, e), load)) in self
            .layer_cosine
            .iter()
            .zip(&self.layer_entropy)
            .zip(&self.load)
            .enumerate()
        {
            let load: Vec<String> = load.iter().map(u64::to_string).collect();
            writeln!(f, "layer.{l} = cosine {c:.6} entropy {e:.6} load {}", load.join(" "))?;
        }
        for (k, bpc) in &self.bpc_by_k {
            writeln!(f, "bpc.k{k} = {bpc:.6}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_entropy_is_ln_n() {
        let d = RouterDecision::from_probs(vec![1.0 / 16.0; 32], 16, 2).unwrap();
        assert!((router_entropy(&d) - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gini_extremes() {
        assert_eq!(gini(&[3.0, 3.0, 3.0]), 0.0);
        assert!((gini(&[0.0, 0.0, 0.0, 8.0]) - 0.75).abs() < 1e-12);
        assert_eq!(gini(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn identical_experts_have_unit_cosine() {
        let mut e = Experts::<f64>::new("e", 3, 4, 5, 0.5, 1);
        let first: Vec<_> = e.expert(0).iter().map(|p| p.value().clone()).collect();
        for i in 1..3 {
            for (p, v) in e.expert_mut(i).into_iter().zip(&first) {
                p.set_value(v.clone());
            }
        }
        let x = Tensor::from_f64(&[2, 4], &[1., -2., 0.5, 3., 0.2, 0.1, -1., 2.]).unwrap();
        assert!((expert_output_cosine(&mut e, &x).unwrap() - 1.0).abs() < 1e-12);
    }
}
