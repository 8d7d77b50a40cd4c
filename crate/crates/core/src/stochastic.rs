//! Gaussian feature augmentation and the clean/noisy blend gate.
//!
//! The noisy input is `x̂ = n₁ ⊙ x + n₂` with `n₁ ~ N(1, σ²)` and
//! `n₂ ~ N(μ, σ²)` drawn per element, where `μ`, `σ` are per-dimension
//! batch statistics of `x`. Statistics and draws are constants on the tape,
//! so gradients reach `x` only through the `n₁ ⊙ x` factor.

use crate::params::Param;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StochasticError {
    #[error("batch statistics need at least one token")]
    EmptyBatch,
    #[error("statistics cover {stats} dimensions, input has {input}")]
    DimMismatch { stats: usize, input: usize },
    #[error("unknown mode {0:?} (expected train or eval)")]
    UnknownMode(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl std::str::FromStr for Mode {
    type Err = StochasticError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            other => Err(StochasticError::UnknownMode(other.to_string())),
        }
    }
}

/// Per-dimension mean and population standard deviation of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Statistics over every row of `x` (all batch and token positions) for
/// each entry of the last axis.
pub fn compute_batch_stats<T: Scalar>(x: &Tensor<T>) -> Result<NoiseStats, StochasticError> {
    if x.is_empty() {
        return Err(StochasticError::EmptyBatch);
    }
    let d = x.last_dim();
    let rows = x.rows();
    let mut mu = vec![0.0; d];
    for row in x.data().chunks(d) {
        mu.iter_mut().zip(row).for_each(|(m, &v)| *m += v.f64());
    }
    mu.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            let dv = row[j].f64() - mu[j];
            var[j] += dv * dv;
        }
    }
    let sigma = var.into_iter().map(|v| (v / rows as f64).sqrt()).collect();
    Ok(NoiseStats { mu, sigma })
}

/// Multiplicative and additive noise for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub n1: Tensor<T>,
    pub n2: Tensor<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    /// Fresh per-element draws for a `[rows, d]` input.
    pub fn sample(shape: &[usize], stats: &NoiseStats, rng: &mut RngStream) -> Result<Self, StochasticError> {
        let d = *shape.last().unwrap_or(&0);
        if d != stats.mu.len() || d != stats.sigma.len() {
            return Err(StochasticError::DimMismatch {
                stats: stats.mu.len(),
                input: d,
            });
        }
        let n: usize = shape.iter().product();
        let mut n1 = Vec::with_capacity(n);
        let mut n2 = Vec::with_capacity(n);
        for i in 0..n {
            let j = i % d;
            let s = stats.sigma[j];
            n1.push(T::of(1.0 + s * rng.normal()));
            n2.push(T::of(stats.mu[j] + s * rng.normal()));
        }
        Ok(Self {
            n1: Tensor::new(shape, n1)?,
            n2: Tensor::new(shape, n2)?,
        })
    }

    /// `n₁ = 1`, `n₂ = 0`: the identity perturbation.
    pub fn identity(shape: &[usize]) -> Self {
        Self {
            n1: Tensor::full(shape, T::one()),
            n2: Tensor::zeros(shape),
        }
    }

    /// `x̂ = n₁ ⊙ x + n₂` on the tape.
    pub fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let n1 = tape.constant(self.n1.clone());
        let n2 = tape.constant(self.n2.clone());
        let y = tape.mul(x, n1)?;
        tape.add(y, n2)
    }
}

/// Noise-augmented copy of `x`, drawing from `rng` with statistics of `x`.
pub fn perturb<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    stats: &NoiseStats,
    rng: &mut RngStream,
) -> Result<(Var, NoiseDraw<T>), StochasticError> {
    let shape = tape.shape(x).to_vec();
    let draw = NoiseDraw::sample(&shape, stats, rng)?;
    let xh = draw.apply(tape, x)?;
    Ok((xh, draw))
}

/// Where the noisy branch gets its perturbation from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource<T> {
    /// Fresh draws from the layer's stream each training forward.
    Sampled,
    /// The same draw every forward; used for gradient and Jacobian probes.
    Fixed(NoiseDraw<T>),
    /// `x̂ = x`.
    Off,
}

/// One-layer gating network `g(x) = sigmoid(x · w + b)`, one scalar per token.
#[derive(Debug, Clone)]
pub struct BlendGate<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> BlendGate<T> {
    pub fn new(prefix: &str, d_model: usize, init_std: f64, seed: u64) -> Self {
        Self {
            w: Param::normal(format!("{prefix}.w"), &[d_model, 1], init_std, seed),
            b: Param::zeros(format!("{prefix}.b"), &[1]),
        }
    }

    /// `[M, 1]` gate values for `x [M, d]`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let w = self.w.var(tape);
        let b = self.b.var(tape);
        let z = tape.matmul(x, w)?;
        let z = tape.add(z, b)?;
        tape.sigmoid(z)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// State owned by an S2MoE layer beyond the plain SMoE parts.
#[derive(Debug, Clone)]
pub struct Stochastic<T> {
    pub gate: BlendGate<T>,
    pub rng: RngStream,
    pub noise: NoiseSource<T>,
    /// Replaces `g(x)` by a constant when set.
    pub gate_override: Option<f64>,
    /// Number of noisy-branch evaluations so far.
    pub perturb_calls: u64,
}

impl<T: Scalar> Stochastic<T> {
    pub fn new(prefix: &str, d_model: usize, init_std: f64, seed: u64) -> Self {
        Self {
            gate: BlendGate::new(&format!("{prefix}.blend"), d_model, init_std, seed),
            rng: RngStream::named(seed, &format!("{prefix}.noise")),
            noise: NoiseSource::Sampled,
            gate_override: None,
            perturb_calls: 0,
        }
    }

    /// Noisy copy of `x` according to the configured source.
    pub fn noisy_input(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var, StochasticError> {
        self.perturb_calls += 1;
        match &self.noise {
            NoiseSource::Off => Ok(x),
            NoiseSource::Fixed(draw) => {
                if draw.n1.shape() != tape.shape(x) {
                    return Err(TensorError::ShapeMismatch {
                        op: "fixed_noise",
                        lhs: draw.n1.shape().to_vec(),
                        rhs: tape.shape(x).to_vec(),
                    }
                    .into());
                }
                Ok(draw.apply(tape, x)?)
            }
            NoiseSource::Sampled => {
                let stats = compute_batch_stats(tape.value(x))?;
                Ok(perturb(tape, x, &stats, &mut self.rng)?.0)
            }
        }
    }

    /// `g(x)` as `[M, 1]`, or the override constant.
    pub fn blend(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        match self.gate_override {
            Some(g) => {
                let m = tape.shape(x)[0];
                Ok(tape.constant(Tensor::full(&[m, 1], T::of(g))))
            }
            None => self.gate.forward(tape, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_features_have_zero_sigma() {
        let x = Tensor::<f64>::from_f64(&[3, 2], &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]).unwrap();
        let s = compute_batch_stats(&x).unwrap();
        assert_eq!(s.mu, vec![1.0, -2.0]);
        assert_eq!(s.sigma, vec![0.0, 0.0]);
    }

    #[test]
    fn two_point_population_std() {
        let x = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 3.0]).unwrap();
        let s = compute_batch_stats(&x).unwrap();
        assert_eq!(s.mu, vec![2.0]);
        assert_eq!(s.sigma, vec![1.0]);
    }

    #[test]
    fn zero_sigma_perturbation_shifts_by_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[0.5, 1.0, 0.5, 1.0]).unwrap());
        let stats = compute_batch_stats(tape.value(x)).unwrap();
        let mut rng = RngStream::new(3, 0);
        let (xh, _) = perturb(&mut tape, x, &stats, &mut rng).unwrap();
        assert_eq!(tape.value(xh).data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn blend_gate_zero_params_is_half() {
        let mut gate = BlendGate::<f64>::new("g", 4, 0.0, 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[2, 4], &[1., 2., 3., 4., -1., 0., 5., 2.]).unwrap());
        let g = gate.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(g).data(), &[0.5, 0.5]);
    }

    #[test]
    fn blend_gate_saturates() {
        let mut gate = BlendGate::<f64>::new("g", 2, 0.0, 1);
        gate.b.value_mut().data_mut()[0] = 30.0;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[3.0, -7.0]).unwrap());
        let g = gate.forward(&mut tape, x).unwrap();
        assert!(tape.value(g).item() > 1.0 - 1e-9);
        assert!(tape.value(g).item() < 1.0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("train".parse::<Mode>().unwrap(), Mode::Train);
        assert!(matches!("infer".parse::<Mode>(), Err(StochasticError::UnknownMode(_))));
    }

    #[test]
    fn empty_batch_rejected() {
        let x = Tensor::<f64>::zeros(&[0]);
        assert_eq!(compute_batch_stats(&x), Err(StochasticError::EmptyBatch));
    }
}
