//! Jacobian and collapse probes of a trained layer.

use std::path::Path;

use super::checkpoint::TrainState;
use super::corpus::{read_corpus, Corpus};
use super::eval::probe_batch;
use super::HarnessError;
use crate::diagnostics::jacobian::MIN_GAP;
use crate::diagnostics::{collapse_metrics, jacobian_probe, CollapseReport, DiagnosticsError, JacobianReport};
use crate::rng::RngStream;
use crate::stochastic::{compute_batch_stats, Mode, NoiseDraw, NoiseSource};
use crate::tensor::Tape;

pub const PROBE_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub layer: usize,
    /// Token row of the validation batch used as probe point.
    pub row: usize,
    pub clean: JacobianReport,
    /// Fixed-draw two-path probe, for stochastic layers.
    pub two_path: Option<JacobianReport>,
    pub collapse: CollapseReport,
}

/// Probes `layer` at the first validation token whose routing is at least
/// [`MIN_GAP`] away from a top-k boundary (on both paths).
pub fn probe_checkpoint(path: &Path, layer: usize) -> Result<ProbeResult, HarnessError> {
    let state = TrainState::<f64>::load(path)?;
    let mut model = state.model;
    let n_layers = model.blocks.len();
    if layer >= n_layers {
        return Err(HarnessError::LayerOutOfRange { layer, n: n_layers });
    }
    let cfg = &state.config;
    let bytes = read_corpus(&cfg.corpus)?;
    let corpus = Corpus::with_vocab(&bytes, cfg.splits, state.vocab.clone())?;
    let (tokens, batch) = probe_batch(&corpus.val, cfg.model.seq_len, cfg.batch_size);
    if tokens.is_empty() {
        return Err(HarnessError::Invalid("validation split is shorter than one sample".into()));
    }
    let collapse = collapse_metrics(&mut model, &tokens, batch)?;

    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &tokens, batch, Mode::Eval)?;
    let inputs = tape.value(out.layers[layer].input).clone();
    let stats = compute_batch_stats(&inputs).map_err(|e| HarnessError::Model(crate::moe::MoeError::from(e).into()))?;
    let d = cfg.model.d_model;
    let k = model.inference_k();
    let moe = &mut model.blocks[layer].moe;
    let stochastic = moe.stochastic.is_some();
    let mut rng = RngStream::named(cfg.model.seed, "probe");
    let draw = if stochastic {
        Some(NoiseDraw::sample(&[1, d], &stats, &mut rng).map_err(|e| HarnessError::Model(crate::moe::MoeError::from(e).into()))?)
    } else {
        None
    };

    let mut last = None;
    for (row, x) in inputs.data().chunks(d).enumerate() {
        if let Some(s) = &mut moe.stochastic {
            s.noise = NoiseSource::Off;
        }
        let clean = match jacobian_probe(moe, x, k, PROBE_EPS) {
            Ok(r) => r,
            Err(e @ DiagnosticsError::Boundary { .. }) => {
                last = Some(e);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let two_path = match &draw {
            Some(draw) => {
                if let Some(s) = &mut moe.stochastic {
                    s.noise = NoiseSource::Fixed(draw.clone());
                }
                match jacobian_probe(moe, x, k, PROBE_EPS) {
                    Ok(r) => Some(r),
                    Err(e @ DiagnosticsError::Boundary { .. }) => {
                        last = Some(e);
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            None => None,
        };
        return Ok(ProbeResult {
            layer,
            row,
            clean,
            two_path,
            collapse,
        });
    }
    Err(last
        .map(HarnessError::from)
        .unwrap_or_else(|| HarnessError::Invalid(format!("no probe point with top-k gap above {MIN_GAP}"))))
}
