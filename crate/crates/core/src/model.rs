//! Pre-norm causal decoder whose feed-forward sublayers are MoE layers.

use std::fmt;
use std::str::FromStr;

use crate::diagnostics::collapse::{load_gini, router_entropy};
use crate::losses::{self, LossBreakdown, LossError};
use crate::moe::{Counters, MoeConfig, MoeError, MoeLayer, MoeOutput};
use crate::nn::dropout;
use crate::params::Param;
use crate::rng::{RngState, RngStream};
use crate::routing::{dropout_schedule_k, RouterKind, RoutingError};
use crate::stochastic::{Mode, NoiseSource};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {t} exceeds the configured maximum {max}")]
    SeqTooLong { t: usize, max: usize },
    #[error("token id {id} at position {pos} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, pos: usize, vocab: usize },
    #[error("{tokens} tokens cannot be split into {batch} sequences")]
    BadBatch { tokens: usize, batch: usize },
    #[error("unknown variant {0:?} (expected smoe, s2moe, smoe-dropout, xmoe or stablemoe)")]
    UnknownVariant(String),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Smoe,
    S2moe,
    SmoeDropout,
    Xmoe,
    StableMoe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Smoe,
        Variant::S2moe,
        Variant::SmoeDropout,
        Variant::Xmoe,
        Variant::StableMoe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Smoe => "smoe",
            Variant::S2moe => "s2moe",
            Variant::SmoeDropout => "smoe-dropout",
            Variant::Xmoe => "xmoe",
            Variant::StableMoe => "stablemoe",
        }
    }

    pub fn router_kind(self) -> RouterKind {
        match self {
            Variant::Smoe | Variant::S2moe => RouterKind::Smoe,
            Variant::SmoeDropout => RouterKind::SmoeDropout,
            Variant::Xmoe => RouterKind::Xmoe,
            Variant::StableMoe => RouterKind::StableMoe,
        }
    }

    pub fn stochastic(self) -> bool {
        self == Variant::S2moe
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_exp: usize,
    pub n_experts: usize,
    pub k_train: usize,
    pub k_eval: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub alpha: f64,
    pub beta: f64,
    pub tau_u: f64,
    pub tau_r: f64,
    pub d_low: usize,
    /// StableMoE router freeze step.
    pub stage_boundary: usize,
    /// Length of the SMoE-Dropout k schedule.
    pub total_steps: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 256,
            n_heads: 8,
            d_exp: 512,
            n_experts: 16,
            k_train: 2,
            k_eval: 2,
            vocab_size: 256,
            seq_len: 512,
            dropout: 0.1,
            variant: Variant::S2moe,
            alpha: losses::DEFAULT_ALPHA,
            beta: losses::DEFAULT_BETA,
            tau_u: 1.0,
            tau_r: crate::routing::XMOE_INIT_TEMPERATURE,
            d_low: 8,
            stage_boundary: 10_000,
            total_steps: 100_000,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_exp == 0 || self.seq_len == 0 {
            return bad("layer count and widths must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_experts < 2 {
            return bad(format!("need at least 2 experts, got {}", self.n_experts));
        }
        for (name, k) in [("k_train", self.k_train), ("k_eval", self.k_eval)] {
            if k == 0 || k > self.n_experts {
                return bad(format!("{name} = {k} outside 1..={}", self.n_experts));
            }
        }
        if self.vocab_size < 2 {
            return bad("vocabulary needs at least 2 symbols".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bad("alpha and beta must be non-negative".into());
        }
        if !(self.tau_u > 0.0) || !(self.tau_r > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.variant == Variant::Xmoe && (self.d_low == 0 || self.d_low >= self.d_model) {
            return bad(format!("d_low {} must be in 1..{}", self.d_low, self.d_model));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        Ok(())
    }

    pub fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            router: self.variant.router_kind(),
            n_experts: self.n_experts,
            d_model: self.d_model,
            d_exp: self.d_exp,
            d_low: self.d_low,
            tau_r: self.tau_r,
            stage_boundary: self.stage_boundary,
            stochastic: self.variant.stochastic(),
            init_std: INIT_STD,
        }
    }
}

const INIT_STD: f64 = 0.02;
const EMBED_STD: f64 = 0.01;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct LayerNorm<T> {
    gamma: Param<T>,
    beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(prefix: &str, d: usize) -> Self {
        Self {
            gamma: Param::ones(format!("{prefix}.gamma"), &[d]),
            beta: Param::zeros(format!("{prefix}.beta"), &[d]),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let g = self.gamma.var(tape);
        let b = self.beta.var(tape);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    ln1: LayerNorm<T>,
    wq: Param<T>,
    wk: Param<T>,
    wv: Param<T>,
    wo: Param<T>,
    ln2: LayerNorm<T>,
    pub moe: MoeLayer<T>,
}

impl<T: Scalar> Block<T> {
    fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let d = cfg.d_model;
        let w = |n: &str| Param::normal(format!("{prefix}.attn.{n}"), &[d, d], INIT_STD, cfg.seed);
        Ok(Self {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d),
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d),
            moe: MoeLayer::new(&format!("{prefix}.moe"), &cfg.moe_config(), cfg.seed)?,
        })
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![
            &self.ln1.gamma,
            &self.ln1.beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2.gamma,
            &self.ln2.beta,
        ];
        v.extend(self.moe.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![
            &mut self.ln1.gamma,
            &mut self.ln1.beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2.gamma,
            &mut self.ln2.beta,
        ];
        v.extend(self.moe.params_mut());
        v
    }
}

/// Everything a forward pass leaves behind for losses and diagnostics.
#[derive(Debug, Clone)]
pub struct LmOutput {
    /// `[batch * seq, vocab]`.
    pub logits: Var,
    /// Attention sublayer outputs per block, before the residual add.
    pub attention: Vec<Var>,
    pub layers: Vec<MoeOutput>,
    pub batch: usize,
    pub seq: usize,
    pub k: usize,
}

/// Router summary of a forward pass, averaged over layers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoutingSummary {
    pub entropy: f64,
    pub load_gini: f64,
}

#[derive(Debug, Clone)]
pub struct LanguageModel<T> {
    cfg: ModelConfig,
    tok_emb: Param<T>,
    pos_emb: Param<T>,
    pub blocks: Vec<Block<T>>,
    ln_f: LayerNorm<T>,
    dropout_rng: RngStream,
    k_eval: usize,
    k_train_now: usize,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let blocks = (0..cfg.n_layers)
            .map(|l| Block::new(&format!("blocks.{l}"), &cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let k_train_now = if cfg.variant == Variant::SmoeDropout {
            dropout_schedule_k(0, cfg.total_steps, cfg.n_experts)?
        } else {
            cfg.k_train
        };
        Ok(Self {
            tok_emb: Param::normal("tok_emb", &[cfg.vocab_size, d], EMBED_STD, cfg.seed),
            pos_emb: Param::normal("pos_emb", &[cfg.seq_len, d], EMBED_STD, cfg.seed),
            blocks,
            ln_f: LayerNorm::new("ln_f", d),
            dropout_rng: RngStream::named(cfg.seed, "dropout"),
            k_eval: cfg.k_eval,
            k_train_now,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn inference_k(&self) -> usize {
        self.k_eval
    }

    /// Experts per token in the current training step.
    pub fn train_k(&self) -> usize {
        self.k_train_now
    }

    pub fn set_inference_k(&mut self, k: usize) -> Result<(), ModelError> {
        if k == 0 || k > self.cfg.n_experts {
            return Err(RoutingError::KOutOfRange {
                k,
                n: self.cfg.n_experts,
            }
            .into());
        }
        self.k_eval = k;
        Ok(())
    }

    /// Per-step schedule hooks: SMoE-Dropout k growth and the StableMoE freeze.
    pub fn begin_step(&mut self, step: usize) -> Result<(), ModelError> {
        for b in &mut self.blocks {
            b.moe.router.begin_step(step);
        }
        if self.cfg.variant == Variant::SmoeDropout {
            let s = step.min(self.cfg.total_steps);
            self.k_train_now = dropout_schedule_k(s, self.cfg.total_steps, self.cfg.n_experts)?;
        }
        Ok(())
    }

    /// Parameters in canonical order (checkpoints and the optimizer rely on it).
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend([&self.ln_f.gamma, &self.ln_f.beta]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend([&mut self.ln_f.gamma, &mut self.ln_f.beta]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    /// Named RNG streams in canonical order.
    pub fn rng_states(&self) -> Vec<(String, RngState)> {
        let mut v = vec![("dropout".to_string(), self.dropout_rng.state())];
        for (l, b) in self.blocks.iter().enumerate() {
            if let Some(s) = &b.moe.stochastic {
                v.push((format!("blocks.{l}.moe.noise"), s.rng.state()));
            }
        }
        v
    }

    pub fn restore_rng(&mut self, name: &str, state: RngState) -> Result<(), ModelError> {
        if name == "dropout" {
            self.dropout_rng = RngStream::restore(state);
            return Ok(());
        }
        for (l, b) in self.blocks.iter_mut().enumerate() {
            if name == format!("blocks.{l}.moe.noise") {
                if let Some(s) = &mut b.moe.stochastic {
                    s.rng = RngStream::restore(state);
                    return Ok(());
                }
            }
        }
        Err(ModelError::Config(format!("no random stream named {name:?}")))
    }

    pub fn set_noise(&mut self, noise: NoiseSource<T>) {
        for b in &mut self.blocks {
            if let Some(s) = &mut b.moe.stochastic {
                s.noise = noise.clone();
            }
        }
    }

    pub fn set_gate_override(&mut self, g: Option<f64>) {
        for b in &mut self.blocks {
            if let Some(s) = &mut b.moe.stochastic {
                s.gate_override = g;
            }
        }
    }

    pub fn counters(&self) -> Counters {
        self.blocks.iter().fold(Counters::default(), |mut acc, b| {
            acc.expert_evals += b.moe.counters.expert_evals;
            acc.smoe_passes += b.moe.counters.smoe_passes;
            acc.noisy_passes += b.moe.counters.noisy_passes;
            acc
        })
    }

    pub fn reset_counters(&mut self) {
        for b in &mut self.blocks {
            b.moe.counters = Counters::default();
        }
    }

    /// Same model at another precision; values are cast, all state is kept.
    pub fn convert<U: Scalar>(&self) -> Result<LanguageModel<U>, ModelError> {
        let mut out = LanguageModel::<U>::new(self.cfg.clone())?;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.set_value(src.value().cast());
            dst.set_trainable(src.trainable());
        }
        for (dst, src) in out.blocks.iter_mut().zip(&self.blocks) {
            if let Some(snap) = src.moe.router.snapshot() {
                dst.moe.router.restore_snapshot(snap.cast());
            }
            if let (Some(d), Some(s)) = (&mut dst.moe.stochastic, &src.moe.stochastic) {
                d.rng = s.rng.clone();
                d.gate_override = s.gate_override;
                d.perturb_calls = s.perturb_calls;
            }
            dst.moe.counters = src.moe.counters;
        }
        out.dropout_rng = self.dropout_rng.clone();
        out.k_eval = self.k_eval;
        out.k_train_now = self.k_train_now;
        Ok(out)
    }

    /// Forward pass over `batch` sequences laid out back to back in `tokens`.
    pub fn forward(&mut self, tape: &mut Tape<T>, tokens: &[usize], batch: usize, mode: Mode) -> Result<LmOutput, ModelError> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(ModelError::BadBatch {
                tokens: tokens.len(),
                batch,
            });
        }
        let seq = tokens.len() / batch;
        if seq > self.cfg.seq_len {
            return Err(ModelError::SeqTooLong {
                t: seq,
                max: self.cfg.seq_len,
            });
        }
        if let Some(pos) = tokens.iter().position(|&t| t >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id: tokens[pos],
                pos,
                vocab: self.cfg.vocab_size,
            });
        }
        let k = match mode {
            Mode::Train => self.k_train_now,
            Mode::Eval => self.k_eval,
        };
        let p_drop = if mode == Mode::Train { self.cfg.dropout } else { 0.0 };

        let te = self.tok_emb.var(tape);
        let pe = self.pos_emb.var(tape);
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq).collect();
        let x = tape.embedding(te, tokens)?;
        let p = tape.embedding(pe, &positions)?;
        let mut x = tape.add(x, p)?;
        x = dropout(tape, x, p_drop, &mut self.dropout_rng)?;

        let heads = self.cfg.n_heads;
        let mut attention = Vec::with_capacity(self.blocks.len());
        let mut layers = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let h = b.ln1.forward(tape, x)?;
            let (wq, wk, wv, wo) = (b.wq.var(tape), b.wk.var(tape), b.wv.var(tape), b.wo.var(tape));
            let q = tape.matmul(h, wq)?;
            let kk = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let a = tape.causal_attention(q, kk, v, batch, seq, heads)?;
            let a = tape.matmul(a, wo)?;
            attention.push(a);
            let a = dropout(tape, a, p_drop, &mut self.dropout_rng)?;
            x = tape.add(x, a)?;

            let h = b.ln2.forward(tape, x)?;
            let out = b.moe.forward(tape, h, mode, k)?;
            let y = dropout(tape, out.y, p_drop, &mut self.dropout_rng)?;
            x = tape.add(x, y)?;
            layers.push(out);
        }
        let h = self.ln_f.forward(tape, x)?;
        let logits = tape.matmul_nt(h, te)?;
        Ok(LmOutput {
            logits,
            attention,
            layers,
            batch,
            seq,
            k,
        })
    }

    /// `task + α·L_b + β·L_u` for a forward pass. `L_b` averages the clean
    /// and (when present) noisy routing decisions of a layer, then layers;
    /// `L_u` averages over layers that ran a noisy branch.
    pub fn objective(
        &self,
        tape: &mut Tape<T>,
        out: &LmOutput,
        targets: &[usize],
    ) -> Result<(Var, LossBreakdown, RoutingSummary), ModelError> {
        let task = losses::task_loss(tape, out.logits, targets)?;
        let mut bal_terms = Vec::new();
        let mut unc_terms = Vec::new();
        let mut summary = RoutingSummary::default();
        for layer in &out.layers {
            let mut parts = vec![losses::balance_loss(tape, layer.clean.probs, &layer.clean.decision)?];
            if let Some(noisy) = &layer.noisy {
                parts.push(losses::balance_loss(tape, noisy.probs, &noisy.decision)?);
            }
            bal_terms.push(mean_of(tape, &parts)?);
            if let Some(xh) = layer.noisy_input {
                let xp = losses::pool_sequences(tape, layer.input, out.batch, out.seq)?;
                let hp = losses::pool_sequences(tape, xh, out.batch, out.seq)?;
                unc_terms.push(losses::uncertainty_loss(tape, xp, hp, self.cfg.tau_u)?);
            }
            summary.entropy += router_entropy(&layer.clean.decision);
            summary.load_gini += load_gini(&layer.clean.decision);
        }
        let n = out.layers.len().max(1) as f64;
        summary.entropy /= n;
        summary.load_gini /= n;
        let bal = if bal_terms.is_empty() { None } else { Some(mean_of(tape, &bal_terms)?) };
        let unc = if unc_terms.is_empty() { None } else { Some(mean_of(tape, &unc_terms)?) };
        let (alpha, beta) = (self.cfg.alpha, self.cfg.beta);
        let total = losses::total_loss(tape, task.loss, bal, unc, alpha, beta)?;
        let read = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().f64());
        let breakdown = LossBreakdown::new(task.nats, read(bal), read(unc), alpha, beta);
        Ok((total, breakdown, summary))
    }

    /// Training-step convenience: forward, objective, backward, and the
    /// gradients in [`Self::params`] order.
    pub fn loss_and_grads(
        &mut self,
        tape: &mut Tape<T>,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
    ) -> Result<(LossBreakdown, RoutingSummary, Vec<Option<Tensor<T>>>), ModelError> {
        tape.clear();
        let out = self.forward(tape, inputs, batch, Mode::Train)?;
        let (total, breakdown, summary) = self.objective(tape, &out, targets)?;
        tape.backward(total)?;
        let grads = self.params().iter().map(|p| p.grad(tape).cloned()).collect();
        Ok((breakdown, summary, grads))
    }
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var, TensorError> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    if parts.len() == 1 {
        Ok(acc)
    } else {
        tape.scale(acc, 1.0 / parts.len() as f64)
    }
}
