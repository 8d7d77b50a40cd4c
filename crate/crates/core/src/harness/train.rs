//! The training loop: sample → forward → loss → backward → Adam.

use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::TrainState;
use super::config::RunConfig;
use super::corpus::{batch_io, ingest, samples, Corpus};
use super::eval::evaluate_tokens;
use super::metrics::{CsvLog, EvalRow, MetricsRow, EVAL_HEADER, HEADER};
use super::HarnessError;
use crate::model::LanguageModel;
use crate::optim::Adam;
use crate::rng::RngStream;
use crate::tensor::{Precision, Scalar, Tape};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of initialising.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
    /// Print a progress line per logged row to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps_done: u64,
    pub initial_bpc: Option<f64>,
    pub final_train_bpc: Option<f64>,
    pub val_bpc: Option<f64>,
    pub metrics_path: PathBuf,
    pub eval_path: PathBuf,
    pub checkpoint: PathBuf,
    pub wall_secs: f64,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.bin"))
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary, HarnessError> {
    let precision = match &opts.resume {
        Some(p) => super::checkpoint::stored_precision(p)?,
        None => cfg.precision,
    };
    match precision {
        Precision::F32 => train_impl::<f32>(cfg, opts),
        Precision::F64 => train_impl::<f64>(cfg, opts),
    }
}

fn fresh_state<T: Scalar>(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainState<T>, HarnessError> {
    let model = LanguageModel::<T>::new(cfg.model_config(corpus.vocab.size()))?;
    let adam = Adam::new(cfg.adam(), model.params());
    let mut config = cfg.clone();
    config.model.vocab_size = corpus.vocab.size();
    Ok(TrainState {
        config,
        step: 0,
        vocab: corpus.vocab.clone(),
        model,
        adam,
        data_rng: RngStream::named(cfg.model.seed, "data"),
    })
}

fn train_impl<T: Scalar>(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary, HarnessError> {
    let started = Instant::now();
    let mut state: TrainState<T> = match &opts.resume {
        Some(p) => {
            let mut s = TrainState::load(p)?;
            s.config.out_dir = cfg.out_dir.clone();
            s
        }
        None => {
            cfg.validate()?;
            let corpus = ingest(&cfg.corpus, cfg.splits)?;
            fresh_state(cfg, &corpus)?
        }
    };
    let run = state.config.clone();
    let corpus = ingest(&run.corpus, run.splits)?;
    if corpus.vocab != state.vocab {
        return Err(HarnessError::Invalid(format!(
            "corpus {} does not reproduce the checkpoint vocabulary",
            run.corpus.display()
        )));
    }
    std::fs::create_dir_all(&run.out_dir).map_err(|e| HarnessError::io(&run.out_dir, e))?;
    let metrics_path = run.out_dir.join("metrics.csv");
    let eval_path = run.out_dir.join("eval.csv");
    let (mut log, mut eval_log) = if opts.resume.is_some() && state.step > 0 {
        (
            CsvLog::resume(&metrics_path, HEADER, state.step.saturating_sub(1))?,
            CsvLog::resume(&eval_path, EVAL_HEADER, state.step)?,
        )
    } else {
        (CsvLog::create(&metrics_path, HEADER)?, CsvLog::create(&eval_path, EVAL_HEADER)?)
    };

    let seq = run.model.seq_len;
    let train_samples = samples(&corpus.train, seq);
    if train_samples.is_empty() {
        return Err(HarnessError::Invalid(format!(
            "train split has {} tokens, fewer than one sample of {seq}",
            corpus.train.len()
        )));
    }
    let total = run.steps as u64;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut tape = Tape::<T>::new();
    let mut summary = TrainSummary {
        steps_done: state.step,
        initial_bpc: None,
        final_train_bpc: None,
        val_bpc: None,
        metrics_path: metrics_path.clone(),
        eval_path: eval_path.clone(),
        checkpoint: checkpoint_path(&run.out_dir, state.step),
        wall_secs: 0.0,
    };
    let mut last_val = None;

    while state.step < stop {
        let step = state.step;
        state.model.begin_step(step as usize)?;
        let batch: Vec<&[usize]> = (0..run.batch_size)
            .map(|_| train_samples[state.data_rng.below(train_samples.len())])
            .collect();
        let (x, y) = batch_io(&batch);
        let (loss, routing, grads) = state.model.loss_and_grads(&mut tape, &x, &y, run.batch_size)?;
        if !loss.total.is_finite() {
            return Err(HarnessError::NonFinite { step });
        }
        if step == 0 {
            summary.initial_bpc = Some(loss.bpc);
        }
        if step % run.eval_interval as u64 == 0 || step + 1 == total {
            let row = MetricsRow {
                step,
                task_nats: loss.task_nats,
                bpc: loss.bpc,
                balance: loss.balance,
                uncertainty: loss.uncertainty,
                total: loss.total,
                router_entropy: routing.entropy,
                expert_load_gini: routing.load_gini,
                k: state.model.train_k(),
                wall_ms: if run.record_wall_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            log.append(&row.to_line())?;
            if opts.verbose {
                eprintln!(
                    "step {step:>6}  bpc {:.4}  balance {:.4}  uncertainty {:.4}  entropy {:.3}  [{:.0}s]",
                    loss.bpc,
                    loss.balance,
                    loss.uncertainty,
                    routing.entropy,
                    started.elapsed().as_secs_f64()
                );
            }
        }
        summary.final_train_bpc = Some(loss.bpc);
        {
            let mut params = state.model.params_mut();
            state.adam.step(&mut params, &grads);
        }
        state.step += 1;
        let done = state.step;

        if done % run.eval_interval as u64 == 0 || done == total {
            let k = state.model.inference_k();
            let ev = evaluate_tokens(&mut state.model, &corpus.val, seq, run.batch_size, run.val_batches)?;
            if let Some(ev) = ev {
                eval_log.append(
                    &EvalRow {
                        step: done,
                        split: "val".into(),
                        k,
                        task_nats: ev.nats,
                        bpc: ev.bpc,
                        ppl: ev.ppl,
                    }
                    .to_line(),
                )?;
                last_val = Some(ev.bpc);
                if opts.verbose {
                    eprintln!("step {done:>6}  val bpc {:.4} (k={k})", ev.bpc);
                }
            }
        }
        if done % run.ckpt_interval as u64 == 0 || done == total || done == stop {
            let path = checkpoint_path(&run.out_dir, done);
            state.save(&path)?;
            summary.checkpoint = path;
        }
    }
    summary.steps_done = state.step;
    summary.val_bpc = last_val;
    summary.wall_secs = started.elapsed().as_secs_f64();
    Ok(summary)
}
