//! Feed-forward experts and the sparse dispatch/combine.

use crate::params::Param;
use crate::routing::{RouterDecision, RoutingError};
use crate::tensor::{Scalar, Tape, TensorError, Var};

/// `N` identically shaped two-layer ReLU networks `d → d_exp → d`.
#[derive(Debug, Clone)]
pub struct Experts<T> {
    d_model: usize,
    d_exp: usize,
    w1: Vec<Param<T>>,
    b1: Vec<Param<T>>,
    w2: Vec<Param<T>>,
    b2: Vec<Param<T>>,
}

impl<T: Scalar> Experts<T> {
    pub fn new(prefix: &str, n: usize, d_model: usize, d_exp: usize, init_std: f64, seed: u64) -> Self {
        let mut s = Self {
            d_model,
            d_exp,
            w1: Vec::with_capacity(n),
            b1: Vec::with_capacity(n),
            w2: Vec::with_capacity(n),
            b2: Vec::with_capacity(n),
        };
        for i in 0..n {
            let p = format!("{prefix}.{i}");
            s.w1.push(Param::normal(format!("{p}.w1"), &[d_model, d_exp], init_std, seed));
            s.b1.push(Param::zeros(format!("{p}.b1"), &[d_exp]));
            s.w2.push(Param::normal(format!("{p}.w2"), &[d_exp, d_model], init_std, seed));
            s.b2.push(Param::zeros(format!("{p}.b2"), &[d_model]));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }

    pub fn d_exp(&self) -> usize {
        self.d_exp
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        (0..self.len())
            .flat_map(|i| [&self.w1[i], &self.b1[i], &self.w2[i], &self.b2[i]])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::with_capacity(4 * self.len());
        for (((w1, b1), w2), b2) in self
            .w1
            .iter_mut()
            .zip(self.b1.iter_mut())
            .zip(self.w2.iter_mut())
            .zip(self.b2.iter_mut())
        {
            out.extend([w1, b1, w2, b2]);
        }
        out
    }

    /// `(w1, b1, w2, b2)` of expert `i`.
    pub fn expert(&self, i: usize) -> [&Param<T>; 4] {
        [&self.w1[i], &self.b1[i], &self.w2[i], &self.b2[i]]
    }

    pub fn expert_mut(&mut self, i: usize) -> [&mut Param<T>; 4] {
        [&mut self.w1[i], &mut self.b1[i], &mut self.w2[i], &mut self.b2[i]]
    }

    /// `relu(x · W1 + b1) · W2 + b2` for every row of `x [m, d]`.
    pub fn expert_forward(&mut self, tape: &mut Tape<T>, x: Var, i: usize) -> Result<Var, TensorError> {
        if i >= self.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "expert_forward",
                index: i,
                extent: self.len(),
            });
        }
        let w1 = self.w1[i].var(tape);
        let b1 = self.b1[i].var(tape);
        let w2 = self.w2[i].var(tape);
        let b2 = self.b2[i].var(tape);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let y = tape.matmul(h, w2)?;
        tape.add(y, b2)
    }

    /// Sparse `Σ_{i selected} gate_i · E_i(x)` per row of `x [M, d]`.
    ///
    /// Gate values are read from `probs [M, N]` so gradients reach the
    /// router. Only experts with at least one routed token are evaluated and
    /// results are accumulated in expert-index order. Returns the output
    /// and the number of (token, expert) evaluations performed.
    pub fn combine(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        decision: &RouterDecision,
        probs: Var,
    ) -> Result<(Var, u64), RoutingError> {
        let n = self.len();
        decision.validate()?;
        if decision.n_experts != n {
            return Err(RoutingError::Inconsistent(format!(
                "decision has {} experts, layer has {n}",
                decision.n_experts
            )));
        }
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != decision.tokens || shape[1] != self.d_model {
            return Err(RoutingError::Inconsistent(format!(
                "input {shape:?} vs {} routed tokens of width {}",
                decision.tokens, self.d_model
            )));
        }
        if tape.shape(probs) != [decision.tokens, n] {
            return Err(RoutingError::Inconsistent("probability tensor shape".into()));
        }
        let rows = decision.rows_per_expert();
        let mut parts = Vec::new();
        let mut part_rows = Vec::new();
        let mut evals = 0u64;
        for (i, r) in rows.into_iter().enumerate() {
            if r.is_empty() {
                continue;
            }
            let xi = tape.gather_rows(x, &r)?;
            let yi = self.expert_forward(tape, xi, i)?;
            let flat: Vec<usize> = r.iter().map(|&t| t * n + i).collect();
            let g = tape.take(probs, &flat, &[r.len(), 1])?;
            parts.push(tape.mul(yi, g)?);
            evals += r.len() as u64;
            part_rows.push(r);
        }
        let y = tape.scatter_add_rows(&parts, &part_rows, decision.tokens, self.d_model)?;
        Ok((y, evals))
    }
}
