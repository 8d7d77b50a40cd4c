//! Training objective: task cross-entropy, load-balancing loss, InfoNCE
//! uncertainty loss, and their weighted sum.

use std::f64::consts::LN_2;

use crate::nn::l2_normalize_rows;
use crate::routing::RouterDecision;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("no tokens to average over")]
    Empty,
    #[error("pooled vector {row} of the {which} batch has zero norm")]
    ZeroNorm { which: &'static str, row: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("coefficients must be non-negative (alpha {alpha}, beta {beta})")]
    NegativeCoefficient { alpha: f64, beta: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Default balancing coefficient.
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Default uncertainty coefficient.
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub task_nats: f64,
    pub bpc: f64,
    pub ppl: f64,
    pub balance: f64,
    pub uncertainty: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(task_nats: f64, balance: f64, uncertainty: f64, alpha: f64, beta: f64) -> Self {
        Self {
            task_nats,
            bpc: task_nats / LN_2,
            ppl: task_nats.exp(),
            balance,
            uncertainty,
            alpha,
            beta,
            total: task_nats + alpha * balance + beta * uncertainty,
        }
    }
}

/// Task loss and its derived metrics.
#[derive(Debug, Clone, Copy)]
pub struct TaskLoss {
    pub loss: Var,
    pub nats: f64,
    pub bpc: f64,
    pub ppl: f64,
}

/// Mean next-token cross-entropy of `logits [M, V]`.
pub fn task_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<TaskLoss, LossError> {
    if targets.is_empty() {
        return Err(LossError::Empty);
    }
    let loss = tape.cross_entropy(logits, targets)?;
    let nats = tape.value(loss).item().f64();
    Ok(TaskLoss {
        loss,
        nats,
        bpc: nats / LN_2,
        ppl: nats.exp(),
    })
}

/// `N · Σ f_i · P_i`: `f_i` is the share of tokens whose top-1 expert is
/// `i` (a constant), `P_i` the mean router probability of expert `i`.
pub fn balance_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, decision: &RouterDecision) -> Result<Var, LossError> {
    let (m, n) = (decision.tokens, decision.n_experts);
    if m == 0 {
        return Err(LossError::Empty);
    }
    let f = top1_fractions(decision);
    let f = tape.constant(Tensor::from_f64(&[n], &f)?);
    let p = tape.mean(probs, 0)?;
    let fp = tape.mul(p, f)?;
    let s = tape.sum_all(fp)?;
    Ok(tape.scale(s, n as f64)?)
}

pub fn top1_fractions(decision: &RouterDecision) -> Vec<f64> {
    let mut f = vec![0.0; decision.n_experts];
    for t in 0..decision.tokens {
        f[decision.selected(t)[0]] += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= decision.tokens as f64);
    f
}

/// Per-sequence mean of `x [batch * seq, d]`, giving `[batch, d]`.
pub fn pool_sequences<T: Scalar>(tape: &mut Tape<T>, x: Var, batch: usize, seq: usize) -> Result<Var, TensorError> {
    let d = tape.shape(x)[1];
    let r = tape.reshape(x, &[batch, seq, d])?;
    tape.mean(r, 1)
}

/// InfoNCE over a similarity matrix: row `i` treats column `i` as the
/// positive and every other column as a negative.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, kappa: Var) -> Result<Var, LossError> {
    let b = tape.shape(kappa)[0];
    if b == 0 {
        return Err(LossError::Empty);
    }
    let targets: Vec<usize> = (0..b).collect();
    Ok(tape.cross_entropy(kappa, &targets)?)
}

/// Uncertainty loss between pooled clean and noisy representations, with
/// `κ(a, b) = cos(a, b) / τ`.
pub fn uncertainty_loss<T: Scalar>(tape: &mut Tape<T>, x_pool: Var, xhat_pool: Var, tau: f64) -> Result<Var, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    let (xs, hs) = (tape.shape(x_pool).to_vec(), tape.shape(xhat_pool).to_vec());
    if xs != hs || xs.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "uncertainty_loss",
            lhs: xs,
            rhs: hs,
        }
        .into());
    }
    for (which, v) in [("clean", x_pool), ("noisy", xhat_pool)] {
        let t = tape.value(v);
        let d = t.last_dim();
        if let Some(row) = t.data().chunks(d).position(|r| r.iter().all(|&x| x == T::zero())) {
            return Err(LossError::ZeroNorm { which, row });
        }
    }
    let a = l2_normalize_rows(tape, x_pool, 0.0)?;
    let b = l2_normalize_rows(tape, xhat_pool, 0.0)?;
    let cos = tape.matmul_nt(a, b)?;
    let kappa = tape.scale(cos, 1.0 / tau)?;
    info_nce(tape, kappa)
}

/// `task + alpha · balance + beta · uncertainty` as a differentiable scalar.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    task: Var,
    balance: Option<Var>,
    uncertainty: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var, LossError> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(LossError::NegativeCoefficient { alpha, beta });
    }
    let mut total = task;
    for (term, c) in [(balance, alpha), (uncertainty, beta)] {
        if let Some(v) = term {
            let s = tape.scale(v, c)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}
