//! Teacher-forced evaluation of a checkpoint at a chosen inference k.

use std::f64::consts::LN_2;
use std::path::Path;

use super::checkpoint::TrainState;
use super::corpus::{batch_io, read_corpus, samples, Corpus};
use super::HarnessError;
use crate::diagnostics::collapse::MIN_TOKENS;
use crate::diagnostics::{collapse_metrics, CollapseReport};
use crate::model::LanguageModel;
use crate::stochastic::Mode;
use crate::tensor::{Scalar, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitScore {
    pub nats: f64,
    pub bpc: f64,
    pub ppl: f64,
    pub tokens: usize,
}

/// Mean next-token loss over every whole sample of `tokens`, at the model's
/// current inference k. `max_batches = 0` covers the whole split. Returns
/// `None` when the split is shorter than one sample.
pub fn evaluate_tokens<T: Scalar>(
    model: &mut LanguageModel<T>,
    tokens: &[usize],
    seq: usize,
    batch_size: usize,
    max_batches: usize,
) -> Result<Option<SplitScore>, HarnessError> {
    let all = samples(tokens, seq);
    let mut tape = Tape::<T>::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for (b, group) in all.chunks(batch_size.max(1)).enumerate() {
        if max_batches > 0 && b >= max_batches {
            break;
        }
        let (x, y) = batch_io(group);
        tape.clear();
        let out = model.forward(&mut tape, &x, group.len(), Mode::Eval)?;
        let ce = tape.cross_entropy(out.logits, &y)?;
        sum += tape.value(ce).item().f64() * y.len() as f64;
        count += y.len();
    }
    if count == 0 {
        return Ok(None);
    }
    let nats = sum / count as f64;
    Ok(Some(SplitScore {
        nats,
        bpc: nats / LN_2,
        ppl: nats.exp(),
        tokens: count,
    }))
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub split: String,
    pub k: usize,
    pub step: u64,
    pub score: SplitScore,
    pub collapse: CollapseReport,
}

/// Loads a checkpoint and scores `split` with `k` experts per token.
pub fn evaluate_checkpoint(path: &Path, k: usize, split: &str) -> Result<EvalResult, HarnessError> {
    let state = TrainState::<f64>::load(path)?;
    evaluate_state(state, k, split)
}

pub fn evaluate_state<T: Scalar>(mut state: TrainState<T>, k: usize, split: &str) -> Result<EvalResult, HarnessError> {
    let n = state.model.config().n_experts;
    if k == 0 || k > n {
        return Err(HarnessError::KOutOfRange { k, n });
    }
    state.model.set_inference_k(k)?;
    let cfg = &state.config;
    let bytes = read_corpus(&cfg.corpus)?;
    let corpus = Corpus::with_vocab(&bytes, cfg.splits, state.vocab.clone())?;
    let tokens = corpus
        .split(split)
        .ok_or_else(|| HarnessError::Invalid(format!("unknown split {split:?}")))?;
    let seq = cfg.model.seq_len;
    let score = evaluate_tokens(&mut state.model, tokens, seq, cfg.batch_size, 0)?
        .ok_or_else(|| HarnessError::Invalid(format!("{split} split is shorter than one sample of {seq}")))?;
    let probe = probe_batch(tokens, seq, cfg.batch_size);
    let collapse = collapse_metrics(&mut state.model, &probe.0, probe.1)?;
    Ok(EvalResult {
        split: split.to_string(),
        k,
        step: state.step,
        score,
        collapse,
    })
}

/// Leading samples of a split as flat model inputs: `batch_size` of them,
/// or more when needed to reach the collapse probe's token minimum.
pub fn probe_batch(tokens: &[usize], seq: usize, batch_size: usize) -> (Vec<usize>, usize) {
    let s = samples(tokens, seq);
    let per = seq.saturating_sub(1).max(1);
    let want = batch_size.max(1).max(MIN_TOKENS.div_ceil(per));
    let group = &s[..s.len().min(want)];
    (batch_io(group).0, group.len())
}
