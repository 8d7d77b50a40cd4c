//! The MoE sublayer: router + experts, optionally wrapped in the
//! clean/noisy two-path combination.
//!
//! In training mode an S2MoE layer computes
//! `y = g(x) ⊙ f(x) + (1 - g(x)) ⊙ f(x̂)`, routing `x` and `x̂`
//! independently. In evaluation mode the noisy branch is skipped and
//! `y = f(x)`, so inference costs exactly one sparse expert pass.

use crate::experts::Experts;
use crate::params::Param;
use crate::routing::{Routed, Router, RouterKind, RoutingError};
use crate::stochastic::{Mode, Stochastic, StochasticError};
use crate::tensor::{Scalar, Tape, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum MoeError {
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    pub router: RouterKind,
    pub n_experts: usize,
    pub d_model: usize,
    pub d_exp: usize,
    pub d_low: usize,
    pub tau_r: f64,
    pub stage_boundary: usize,
    pub stochastic: bool,
    pub init_std: f64,
}

/// Activity counters; used to check sparsity and which code paths ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// (token, expert) evaluations.
    pub expert_evals: u64,
    /// Sparse SMoE passes (one per routed input).
    pub smoe_passes: u64,
    /// Noisy-branch evaluations.
    pub noisy_passes: u64,
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub y: Var,
    pub input: Var,
    pub clean: Routed,
    pub noisy: Option<Routed>,
    pub noisy_input: Option<Var>,
    pub gate: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct MoeLayer<T> {
    pub router: Router<T>,
    pub experts: Experts<T>,
    pub stochastic: Option<Stochastic<T>>,
    pub counters: Counters,
}

impl<T: Scalar> MoeLayer<T> {
    pub fn new(prefix: &str, cfg: &MoeConfig, seed: u64) -> Result<Self, MoeError> {
        let router = Router::new(
            &format!("{prefix}.router"),
            cfg.router,
            cfg.n_experts,
            cfg.d_model,
            cfg.d_low,
            cfg.tau_r,
            cfg.stage_boundary,
            cfg.init_std,
            seed,
        )?;
        let experts = Experts::new(
            &format!("{prefix}.experts"),
            cfg.n_experts,
            cfg.d_model,
            cfg.d_exp,
            cfg.init_std,
            seed,
        );
        let stochastic = cfg
            .stochastic
            .then(|| Stochastic::new(prefix, cfg.d_model, cfg.init_std, seed));
        Ok(Self {
            router,
            experts,
            stochastic,
            counters: Counters::default(),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.router.params();
        v.extend(self.experts.params());
        if let Some(s) = &self.stochastic {
            v.extend(s.gate.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.router.params_mut();
        v.extend(self.experts.params_mut());
        if let Some(s) = &mut self.stochastic {
            v.extend(s.gate.params_mut());
        }
        v
    }

    /// One sparse pass `f_SMoE(x)` with top-`k` routing.
    pub fn smoe(&mut self, tape: &mut Tape<T>, x: Var, k: usize) -> Result<(Var, Routed), MoeError> {
        let routed = self.router.route(tape, x, k)?;
        let (y, evals) = self.experts.combine(tape, x, &routed.decision, routed.probs)?;
        self.counters.expert_evals += evals;
        self.counters.smoe_passes += 1;
        Ok((y, routed))
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, k: usize) -> Result<MoeOutput, MoeError> {
        let two_path = mode == Mode::Train && self.stochastic.is_some();
        if !two_path {
            let (y, clean) = self.smoe(tape, x, k)?;
            return Ok(MoeOutput {
                y,
                input: x,
                clean,
                noisy: None,
                noisy_input: None,
                gate: None,
            });
        }
        let (yc, clean) = self.smoe(tape, x, k)?;
        let xh = self
            .stochastic
            .as_mut()
            .expect("two-path layer")
            .noisy_input(tape, x)?;
        let (yh, noisy) = self.smoe(tape, xh, k)?;
        self.counters.noisy_passes += 1;
        let g = self.stochastic.as_mut().expect("two-path layer").blend(tape, x)?;
        // g·yc + (1-g)·yh  ==  yh + g·(yc - yh)
        let diff = tape.sub(yc, yh)?;
        let gd = tape.mul(diff, g)?;
        let y = tape.add(yh, gd)?;
        Ok(MoeOutput {
            y,
            input: x,
            clean,
            noisy: Some(noisy),
            noisy_input: Some(xh),
            gate: Some(g),
        })
    }
}
