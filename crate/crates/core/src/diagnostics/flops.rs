//! Closed-form per-token multiply-accumulate counts.
//!
//! Only linear maps are counted; norms, activations and softmax are free.
//! Per layer:
//!
//! | item        | MACs                         |
//! |-------------|------------------------------|
//! | attn_proj   | `4 d²` (q, k, v, out)        |
//! | attn_mix    | `2 T d` (scores and values)  |
//! | router      | `N d` (`d·d_low + N·d_low` for XMoE) |
//! | experts     | `k · 2 d d_exp`              |
//! | blend_gate  | `d` (stochastic training only) |
//!
//! plus the tied output head, `d V`, once per token. In training mode the
//! stochastic variant routes and evaluates experts twice.

use std::fmt;

use super::DiagnosticsError;
use crate::model::{ModelConfig, Variant};
use crate::stochastic::Mode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub variant: Variant,
    pub mode: Mode,
    pub k: usize,
    pub seq_len: usize,
    pub n_layers: usize,
    pub attn_proj: u64,
    pub attn_mix: u64,
    pub router: u64,
    pub experts: u64,
    pub blend_gate: u64,
    pub head: u64,
}

impl FlopsReport {
    pub fn per_layer(&self) -> u64 {
        self.attn_proj + self.attn_mix + self.router + self.experts + self.blend_gate
    }

    pub fn total(&self) -> u64 {
        self.n_layers as u64 * self.per_layer() + self.head
    }
}

pub fn flops_per_token(cfg: &ModelConfig, k: usize, seq_len: usize, mode: Mode) -> Result<FlopsReport, DiagnosticsError> {
    if k > cfg.n_experts {
        return Err(DiagnosticsError::KTooLarge { k, n: cfg.n_experts });
    }
    let (d, n, de, t) = (
        cfg.d_model as u64,
        cfg.n_experts as u64,
        cfg.d_exp as u64,
        seq_len as u64,
    );
    let paths = if mode == Mode::Train && cfg.variant.stochastic() { 2 } else { 1 };
    let router = match cfg.variant {
        Variant::Xmoe => d * cfg.d_low as u64 + n * cfg.d_low as u64,
        _ => n * d,
    };
    Ok(FlopsReport {
        variant: cfg.variant,
        mode,
        k,
        seq_len,
        n_layers: cfg.n_layers,
        attn_proj: 4 * d * d,
        attn_mix: 2 * t * d,
        router: paths * router,
        experts: paths * k as u64 * 2 * d * de,
        blend_gate: if paths == 2 { d } else { 0 },
        head: d * cfg.vocab_size as u64,
    })
}

/// Relative saving `1 - cost(to) / cost(from)`.
pub fn reduction(from: &FlopsReport, to: &FlopsReport) -> f64 {
    1.0 - to.total() as f64 / from.total() as f64
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Train => "train",
            Mode::Eval => "eval",
        };
        writeln!(f, "[flops]")?;
        writeln!(f, "variant = {}", self.variant)?;
        writeln!(f, "mode = {mode}")?;
        writeln!(f, "k = {}", self.k)?;
        writeln!(f, "seq_len = {}", self.seq_len)?;
        writeln!(f, "layers = {}", self.n_layers)?;
        writeln!(f, "attn_proj_per_layer = {}", self.attn_proj)?;
        writeln!(f, "attn_mix_per_layer = {}", self.attn_mix)?;
        writeln!(f, "router_per_layer = {}", self.router)?;
        writeln!(f, "experts_per_layer = {}", self.experts)?;
        writeln!(f, "blend_gate_per_layer = {}", self.blend_gate)?;
        writeln!(f, "head = {}", self.head)?;
        writeln!(f, "total_per_token = {}", self.total())
    }
}
