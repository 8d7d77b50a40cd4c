//! Expert selection: softmax routing probabilities and top-k gate masks.
//!
//! Four router flavours share one decision type:
//!
//! * `Smoe` — `softmax(x · W_eᵀ)` with a learned expert-embedding matrix.
//! * `SmoeDropout` — same scores, but `W_e` is frozen at its random
//!   initialisation and training `k` grows linearly with the step count.
//! * `Xmoe` — tokens are down-projected, both sides L2-normalised, and the
//!   cosine score divided by a learned temperature.
//! * `StableMoe` — trains `W_e` until a boundary step, then snapshots and
//!   freezes it while experts keep training.
//!
//! Unselected experts get an exact zero gate; kept gates are the raw
//! probabilities, not renormalised.

use crate::nn::l2_normalize_rows;
use crate::params::Param;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RoutingError {
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("router temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("total_steps must be positive")]
    ZeroTotalSteps,
    #[error("step {step} beyond total_steps {total}")]
    StepBeyondTotal { step: usize, total: usize },
    #[error("router needs at least 2 experts, got {0}")]
    TooFewExperts(usize),
    #[error("low-rank routing dimension {d_low} must be below model dimension {d}")]
    BadLowDim { d_low: usize, d: usize },
    #[error("inconsistent routing decision: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouterKind {
    Smoe,
    SmoeDropout,
    Xmoe,
    StableMoe,
}

impl RouterKind {
    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Smoe => "smoe",
            RouterKind::SmoeDropout => "smoe-dropout",
            RouterKind::Xmoe => "xmoe",
            RouterKind::StableMoe => "stablemoe",
        }
    }
}

/// Per-token routing outcome over `tokens` rows and `n_experts` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterDecision {
    pub tokens: usize,
    pub n_experts: usize,
    pub k_used: usize,
    /// Row-major `[tokens, n_experts]`.
    pub probs: Vec<f64>,
    /// Row-major `[tokens, k_used]`, each row in descending gate order.
    pub indices: Vec<usize>,
    /// Row-major `[tokens, n_experts]`, zero off the selected set.
    pub gates: Vec<f64>,
}

impl RouterDecision {
    /// Builds a decision from probability rows.
    pub fn from_probs(probs: Vec<f64>, n_experts: usize, k: usize) -> Result<Self, RoutingError> {
        if k == 0 || k > n_experts {
            return Err(RoutingError::KOutOfRange { k, n: n_experts });
        }
        let tokens = probs.len() / n_experts;
        let mut indices = Vec::with_capacity(tokens * k);
        let mut gates = Vec::with_capacity(probs.len());
        for row in probs.chunks(n_experts) {
            let (idx, g) = topk_mask(row, k);
            indices.extend(idx);
            gates.extend(g);
        }
        Ok(Self {
            tokens,
            n_experts,
            k_used: k,
            probs,
            indices,
            gates,
        })
    }

    pub fn probs_row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.n_experts..(t + 1) * self.n_experts]
    }

    pub fn gates_row(&self, t: usize) -> &[f64] {
        &self.gates[t * self.n_experts..(t + 1) * self.n_experts]
    }

    pub fn selected(&self, t: usize) -> &[usize] {
        &self.indices[t * self.k_used..(t + 1) * self.k_used]
    }

    /// Token rows routed to each expert, in token order.
    pub fn rows_per_expert(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_experts];
        for t in 0..self.tokens {
            for &i in self.selected(t) {
                rows[i].push(t);
            }
        }
        rows
    }

    /// Smallest gap between the k-th and (k+1)-th largest probability over
    /// all tokens; infinite when every expert is selected.
    pub fn min_boundary_gap(&self) -> f64 {
        if self.k_used >= self.n_experts {
            return f64::INFINITY;
        }
        (0..self.tokens)
            .map(|t| {
                let mut row = self.probs_row(t).to_vec();
                row.sort_by(|a, b| b.total_cmp(a));
                row[self.k_used - 1] - row[self.k_used]
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<(), RoutingError> {
        let bad = |m: String| Err(RoutingError::Inconsistent(m));
        if self.probs.len() != self.tokens * self.n_experts || self.gates.len() != self.probs.len() {
            return bad("probs/gates length does not match tokens × experts".into());
        }
        if self.indices.len() != self.tokens * self.k_used {
            return bad("indices length does not match tokens × k".into());
        }
        for t in 0..self.tokens {
            let sel = self.selected(t);
            for (a, &i) in sel.iter().enumerate() {
                if i >= self.n_experts {
                    return bad(format!("token {t} selects expert {i} of {}", self.n_experts));
                }
                if sel[..a].contains(&i) {
                    return bad(format!("token {t} selects expert {i} twice"));
                }
            }
            let nonzero_off = self
                .gates_row(t)
                .iter()
                .enumerate()
                .any(|(i, &g)| g != 0.0 && !sel.contains(&i));
            if nonzero_off {
                return bad(format!("token {t} has a gate outside its selected set"));
            }
        }
        Ok(())
    }
}

/// Keeps the `k` largest entries of `probs` (ties to the lowest index) and
/// zeroes the rest. Indices come back in descending value order.
pub fn topk_mask(probs: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order.truncate(k);
    let mut gates = vec![0.0; probs.len()];
    for &i in &order {
        gates[i] = probs[i];
    }
    (order, gates)
}

/// Number of active experts at `step` for the growing-k schedule:
/// `clamp(ceil(n · step / total), 1, n)`.
pub fn dropout_schedule_k(step: usize, total_steps: usize, n: usize) -> Result<usize, RoutingError> {
    if total_steps == 0 {
        return Err(RoutingError::ZeroTotalSteps);
    }
    if step > total_steps {
        return Err(RoutingError::StepBeyondTotal {
            step,
            total: total_steps,
        });
    }
    let k = (n * step).div_ceil(total_steps);
    Ok(k.clamp(1, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StableMode {
    Learned,
    Frozen,
}

pub fn stablemoe_mode(step: usize, stage_boundary: usize) -> StableMode {
    if step < stage_boundary {
        StableMode::Learned
    } else {
        StableMode::Frozen
    }
}

#[derive(Debug, Clone)]
enum Scorer<T> {
    /// `W_e [N, d]`.
    Linear { w_e: Param<T> },
    /// `down [d_low, d]`, `emb [N, d_low]`, `log_scale [1]` with τ = exp(-log_scale).
    LowDim {
        down: Param<T>,
        emb: Param<T>,
        log_scale: Param<T>,
    },
}

/// Router parameters plus the per-variant training state.
#[derive(Debug, Clone)]
pub struct Router<T> {
    kind: RouterKind,
    n_experts: usize,
    d_model: usize,
    scorer: Scorer<T>,
    stage_boundary: usize,
    snapshot: Option<Tensor<T>>,
    snapshot_events: usize,
}

/// Output of [`Router::route`]: the decision plus the differentiable probabilities.
#[derive(Debug, Clone)]
pub struct Routed {
    pub decision: RouterDecision,
    pub probs: Var,
}

pub const XMOE_INIT_TEMPERATURE: f64 = 0.07;

impl<T: Scalar> Router<T> {
    /// `prefix` names the parameters, `seed` drives initialisation.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        kind: RouterKind,
        n_experts: usize,
        d_model: usize,
        d_low: usize,
        tau_r: f64,
        stage_boundary: usize,
        init_std: f64,
        seed: u64,
    ) -> Result<Self, RoutingError> {
        if n_experts < 2 {
            return Err(RoutingError::TooFewExperts(n_experts));
        }
        let scorer = match kind {
            RouterKind::Xmoe => {
                if d_low == 0 || d_low >= d_model {
                    return Err(RoutingError::BadLowDim { d_low, d: d_model });
                }
                if !(tau_r > 0.0) || !tau_r.is_finite() {
                    return Err(RoutingError::BadTemperature(tau_r));
                }
                let mut log_scale = Param::zeros(format!("{prefix}.log_scale"), &[1]);
                log_scale.value_mut().data_mut()[0] = T::of((1.0 / tau_r).ln());
                Scorer::LowDim {
                    down: Param::normal(format!("{prefix}.down"), &[d_low, d_model], init_std, seed),
                    emb: Param::normal(format!("{prefix}.emb"), &[n_experts, d_low], init_std, seed),
                    log_scale,
                }
            }
            _ => Scorer::Linear {
                w_e: Param::normal(format!("{prefix}.w_e"), &[n_experts, d_model], init_std, seed),
            },
        };
        let mut router = Self {
            kind,
            n_experts,
            d_model,
            scorer,
            stage_boundary,
            snapshot: None,
            snapshot_events: 0,
        };
        if kind == RouterKind::SmoeDropout {
            router.freeze();
        }
        Ok(router)
    }

    pub fn kind(&self) -> RouterKind {
        self.kind
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn stage_boundary(&self) -> usize {
        self.stage_boundary
    }

    pub fn snapshot(&self) -> Option<&Tensor<T>> {
        self.snapshot.as_ref()
    }

    pub fn snapshot_events(&self) -> usize {
        self.snapshot_events
    }

    /// Effective XMoE temperature.
    pub fn temperature(&self) -> Option<f64> {
        match &self.scorer {
            Scorer::LowDim { log_scale, .. } => Some((-log_scale.value().item().f64()).exp()),
            Scorer::Linear { .. } => None,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match &self.scorer {
            Scorer::Linear { w_e } => vec![w_e],
            Scorer::LowDim { down, emb, log_scale } => vec![down, emb, log_scale],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.scorer {
            Scorer::Linear { w_e } => vec![w_e],
            Scorer::LowDim { down, emb, log_scale } => vec![down, emb, log_scale],
        }
    }

    /// Expert-embedding matrix of the linear scorer.
    pub fn w_e(&self) -> Option<&Param<T>> {
        match &self.scorer {
            Scorer::Linear { w_e } => Some(w_e),
            Scorer::LowDim { .. } => None,
        }
    }

    pub fn w_e_mut(&mut self) -> Option<&mut Param<T>> {
        match &mut self.scorer {
            Scorer::Linear { w_e } => Some(w_e),
            Scorer::LowDim { .. } => None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.trainable())
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.set_trainable(false);
        }
    }

    /// Restores a stage-two StableMoE router from a checkpoint.
    pub fn restore_snapshot(&mut self, snapshot: Tensor<T>) {
        self.snapshot = Some(snapshot);
        self.snapshot_events = 1;
        self.freeze();
    }

    /// Advances per-step router state. For StableMoE this takes the
    /// snapshot (once) when `step` reaches the stage boundary.
    pub fn begin_step(&mut self, step: usize) {
        if self.kind == RouterKind::StableMoe
            && stablemoe_mode(step, self.stage_boundary) == StableMode::Frozen
            && self.snapshot.is_none()
        {
            if let Scorer::Linear { w_e } = &self.scorer {
                self.snapshot = Some(w_e.value().clone());
            }
            self.snapshot_events += 1;
            self.freeze();
        }
    }

    /// Raw routing logits `[M, N]` for `x [M, d]`.
    pub fn scores(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var, RoutingError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(TensorError::ShapeMismatch {
                op: "route",
                lhs: shape,
                rhs: vec![self.d_model],
            }
            .into());
        }
        Ok(match &mut self.scorer {
            Scorer::Linear { w_e } => {
                let w = w_e.var(tape);
                tape.matmul_nt(x, w)?
            }
            Scorer::LowDim { down, emb, log_scale } => {
                let tau = (-log_scale.value().item().f64()).exp();
                if !(tau > 0.0) || !tau.is_finite() {
                    return Err(RoutingError::BadTemperature(tau));
                }
                let dw = down.var(tape);
                let h = tape.matmul_nt(x, dw)?;
                let h = l2_normalize_rows(tape, h, 1e-12)?;
                let e = emb.var(tape);
                let e = l2_normalize_rows(tape, e, 1e-12)?;
                let cos = tape.matmul_nt(h, e)?;
                let s = log_scale.var(tape);
                let inv_tau = tape.exp(s)?;
                tape.mul(cos, inv_tau)?
            }
        })
    }

    /// Routes every row of `x [M, d]` to its top-`k` experts.
    pub fn route(&mut self, tape: &mut Tape<T>, x: Var, k: usize) -> Result<Routed, RoutingError> {
        if k == 0 || k > self.n_experts {
            return Err(RoutingError::KOutOfRange { k, n: self.n_experts });
        }
        let scores = self.scores(tape, x)?;
        route_scores(tape, scores, k)
    }
}

/// Softmax over the expert axis of `scores [M, N]` followed by top-k masking.
pub fn route_scores<T: Scalar>(tape: &mut Tape<T>, scores: Var, k: usize) -> Result<Routed, RoutingError> {
    let n = tape.shape(scores)[1];
    if k == 0 || k > n {
        return Err(RoutingError::KOutOfRange { k, n });
    }
    let probs = tape.softmax(scores, 1)?;
    let decision = RouterDecision::from_probs(tape.value(probs).to_f64(), n, k)?;
    Ok(Routed { decision, probs })
}
