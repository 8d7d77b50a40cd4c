//! Jacobian structure probes, collapse indicators and FLOPs accounting.

pub mod collapse;
pub mod flops;
pub mod jacobian;

pub use collapse::{collapse_metrics, CollapseReport};
pub use flops::{flops_per_token, FlopsReport};
pub use jacobian::{jacobian_probe, JacobianReport};

use crate::model::ModelError;
use crate::moe::MoeError;
use crate::routing::RoutingError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("probe point sits on a routing boundary (top-k gap {gap:.3e} <= {min:.0e})")]
    Boundary { gap: f64, min: f64 },
    #[error("need at least {need} tokens, got {got}")]
    TooFewTokens { got: usize, need: usize },
    #[error("invalid probe: {0}")]
    BadProbe(String),
    #[error("k = {k} exceeds the {n} experts")]
    KTooLarge { k: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
