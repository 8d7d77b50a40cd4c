//! Stochastic sparse mixture-of-experts: a two-path MoE layer that routes
//! both clean and Gaussian-augmented inputs, baseline routers, a small
//! reverse-mode autodiff engine, a character-level language-model training
//! stack, and diagnostics for Jacobian rank, expert collapse and FLOPs.

pub mod diagnostics;
pub mod harness;
pub mod experts;
pub mod losses;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod routing;
pub mod stochastic;
pub mod tensor;

pub use model::{LanguageModel, ModelConfig, Variant};
pub use moe::{MoeConfig, MoeLayer};
pub use stochastic::{Mode, NoiseSource};
pub use tensor::{Precision, Scalar, Tape, Tensor, Var};
