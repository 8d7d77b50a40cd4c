mod common;

use common::{matmul, max_abs_diff, model_grad_check, rng, scramble, smoe_oracle, softmax};
use rand::Rng;
use s2moe::model::ModelError;
use s2moe::optim::{Adam, AdamConfig};
use s2moe::{LanguageModel, Mode, ModelConfig, Tape, Variant};

fn small(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_exp: 6,
        n_experts: 4,
        k_train: 2,
        k_eval: 2,
        vocab_size: 7,
        seq_len: 8,
        dropout: 0.0,
        variant,
        d_low: 4,
        stage_boundary: 5,
        total_steps: 20,
        seed,
        ..Default::default()
    }
}

fn tokens(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

fn logits(m: &mut LanguageModel<f64>, toks: &[usize], batch: usize, mode: Mode) -> Vec<f64> {
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, toks, batch, mode).unwrap();
    tape.value(out.logits).to_f64()
}

#[test]
fn eval_logits_are_causal() {
    for v in Variant::ALL {
        let mut m = LanguageModel::<f64>::new(small(v, 1)).unwrap();
        scramble(&mut m, 2);
        let toks = tokens(3, 8, 7);
        let base = logits(&mut m, &toks, 1, Mode::Eval);
        for t in 0..8 {
            let mut changed = toks.clone();
            changed[t] = (changed[t] + 1) % 7;
            let after = logits(&mut m, &changed, 1, Mode::Eval);
            assert_eq!(&base[..t * 7], &after[..t * 7], "{v} position {t}");
            assert_ne!(&base[t * 7..(t + 1) * 7], &after[t * 7..(t + 1) * 7], "{v} position {t}");
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = g.len();
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + 1e-5).sqrt();
            (0..d).map(move |j| (row[j] - mean) * rs * g[j] + b[j])
        })
        .collect()
}

fn causal_attention(q: &[f64], k: &[f64], v: &[f64], seq: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; seq * d];
    for h in 0..heads {
        for i in 0..seq {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for c in 0..dh {
                out[i * d + h * dh + c] = (0..=i).map(|j| p[j] * v[j * d + h * dh + c]).sum();
            }
        }
    }
    out
}

#[test]
fn one_layer_matches_straight_line_evaluation() {
    let cfg = ModelConfig {
        n_layers: 1,
        vocab_size: 5,
        ..small(Variant::Smoe, 4)
    };
    let (d, t) = (8, 6);
    for seed in 0..5 {
        let mut m = LanguageModel::<f64>::new(cfg.clone()).unwrap();
        scramble(&mut m, seed);
        let toks = tokens(seed + 9, t, 5);
        let got = logits(&mut m, &toks, 1, Mode::Eval);

        let p = |name: &str| {
            m.params()
                .into_iter()
                .find(|p| p.name() == name)
                .unwrap_or_else(|| panic!("{name}"))
                .value()
                .to_f64()
        };
        let (te, pe) = (p("tok_emb"), p("pos_emb"));
        let mut x: Vec<f64> = toks
            .iter()
            .enumerate()
            .flat_map(|(i, &id)| (0..d).map(move |c| (id, i, c)))
            .map(|(id, i, c)| te[id * d + c] + pe[i * d + c])
            .collect();
        let h = layer_norm(&x, &p("blocks.0.ln1.gamma"), &p("blocks.0.ln1.beta"));
        let q = matmul(&h, &p("blocks.0.attn.wq"), t, d, d);
        let k = matmul(&h, &p("blocks.0.attn.wk"), t, d, d);
        let v = matmul(&h, &p("blocks.0.attn.wv"), t, d, d);
        let a = matmul(&causal_attention(&q, &k, &v, t, d, 2), &p("blocks.0.attn.wo"), t, d, d);
        x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
        let h = layer_norm(&x, &p("blocks.0.ln2.gamma"), &p("blocks.0.ln2.beta"));
        let (y, _) = smoe_oracle(&m.blocks[0].moe, &h, d, 2);
        x.iter_mut().zip(&y).for_each(|(x, y)| *x += y);
        let h = layer_norm(&x, &p("ln_f.gamma"), &p("ln_f.beta"));
        let want: Vec<f64> = h
            .chunks(d)
            .flat_map(|row| (0..5).map(|w| (0..d).map(|c| row[c] * te[w * d + c]).sum::<f64>()).collect::<Vec<_>>())
            .collect();
        assert!(max_abs_diff(&got, &want) < 1e-12, "seed {seed}");
    }
}

/// An S2MoE model carrying the SMoE model's weights (the blend gate is extra).
fn twins(seed: u64) -> (LanguageModel<f64>, LanguageModel<f64>) {
    let mut smoe = LanguageModel::<f64>::new(small(Variant::Smoe, seed)).unwrap();
    scramble(&mut smoe, seed + 1);
    let mut s2 = LanguageModel::<f64>::new(small(Variant::S2moe, seed)).unwrap();
    for p in s2.params_mut() {
        if let Some(src) = smoe.params().into_iter().find(|q| q.name() == p.name()) {
            p.set_value(src.value().clone());
        }
    }
    (smoe, s2)
}

#[test]
fn eval_s2moe_is_bitwise_smoe() {
    for seed in 0..5 {
        let (mut a, mut b) = twins(seed);
        let toks = tokens(seed, 16, 7);
        for k in 1..=4 {
            a.set_inference_k(k).unwrap();
            b.set_inference_k(k).unwrap();
            assert_eq!(logits(&mut a, &toks, 2, Mode::Eval), logits(&mut b, &toks, 2, Mode::Eval));
        }
        assert_eq!(b.counters().noisy_passes, 0);
    }
}

#[test]
fn full_selection_gates_equal_probs() {
    for v in Variant::ALL {
        let mut m = LanguageModel::<f64>::new(small(v, 5)).unwrap();
        scramble(&mut m, 6);
        m.set_inference_k(4).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &tokens(7, 16, 7), 2, Mode::Eval).unwrap();
        for layer in &out.layers {
            assert_eq!(layer.clean.decision.gates, layer.clean.decision.probs, "{v}");
        }
    }
}

#[test]
fn expert_counter_scales_with_k() {
    let mut m = LanguageModel::<f64>::new(small(Variant::S2moe, 8)).unwrap();
    let toks = tokens(9, 16, 7);
    m.set_inference_k(1).unwrap();
    logits(&mut m, &toks, 2, Mode::Eval);
    let one = m.counters().expert_evals;
    assert_eq!(one, 16 * 2);
    m.reset_counters();
    m.set_inference_k(2).unwrap();
    logits(&mut m, &toks, 2, Mode::Eval);
    assert_eq!(m.counters().expert_evals, 2 * one);
    // training runs both branches
    m.reset_counters();
    logits(&mut m, &toks, 2, Mode::Train);
    let c = m.counters();
    assert_eq!((c.expert_evals, c.smoe_passes, c.noisy_passes), (4 * one, 4, 2));
}

#[test]
fn inference_k_is_validated_and_idempotent() {
    let mut m = LanguageModel::<f64>::new(small(Variant::Smoe, 1)).unwrap();
    let toks = tokens(2, 8, 7);
    m.set_inference_k(3).unwrap();
    let a = logits(&mut m, &toks, 1, Mode::Eval);
    m.set_inference_k(3).unwrap();
    assert_eq!(a, logits(&mut m, &toks, 1, Mode::Eval));
    for k in [0, 5] {
        assert!(matches!(m.set_inference_k(k), Err(ModelError::Routing(_))));
    }
    assert_eq!(m.inference_k(), 3);
}

#[test]
fn first_attention_does_not_depend_on_k() {
    let mut m = LanguageModel::<f64>::new(small(Variant::S2moe, 3)).unwrap();
    scramble(&mut m, 4);
    let toks = tokens(5, 16, 7);
    let mut seen = Vec::new();
    for k in 1..=4 {
        m.set_inference_k(k).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &toks, 2, Mode::Eval).unwrap();
        seen.push(tape.value(out.attention[0]).to_f64());
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn bad_inputs_rejected() {
    let mut m = LanguageModel::<f64>::new(small(Variant::Smoe, 1)).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(
        m.forward(&mut tape, &[0; 9], 1, Mode::Eval),
        Err(ModelError::SeqTooLong { t: 9, max: 8 })
    ));
    assert!(matches!(
        m.forward(&mut tape, &[0; 9], 2, Mode::Eval),
        Err(ModelError::BadBatch { .. })
    ));
    assert!(matches!(
        m.forward(&mut tape, &[0, 7], 1, Mode::Eval),
        Err(ModelError::TokenOutOfRange { id: 7, pos: 1, .. })
    ));
    let mut bad = small(Variant::Smoe, 1);
    bad.k_train = 5;
    assert!(LanguageModel::<f64>::new(bad).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for v in [Variant::Smoe, Variant::S2moe, Variant::Xmoe] {
        for seed in 0..3 {
            let e = model_grad_check(v, seed);
            assert!(e < 1e-3, "{v} seed {seed}: {e}");
        }
    }
}

fn train_run(variant: Variant, steps: usize) -> (Vec<u64>, Vec<Vec<u64>>) {
    let cfg = ModelConfig {
        dropout: 0.1,
        ..small(variant, 11)
    };
    let mut m = LanguageModel::<f64>::new(cfg).unwrap();
    let mut adam = Adam::new(
        AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        m.params(),
    );
    let mut tape = Tape::new();
    let mut losses = Vec::new();
    for step in 0..steps {
        m.begin_step(step).unwrap();
        let all = tokens(step as u64, 2 * 9, 7);
        let (x, y): (Vec<usize>, Vec<usize>) = all
            .chunks(9)
            .flat_map(|s| s[..8].iter().copied().zip(s[1..].iter().copied()).collect::<Vec<_>>())
            .unzip();
        let (loss, _, grads) = m.loss_and_grads(&mut tape, &x, &y, 2).unwrap();
        adam.step(&mut m.params_mut(), &grads);
        losses.push(loss.total.to_bits());
    }
    let params = m
        .params()
        .iter()
        .map(|p| p.value().to_f64().iter().map(|v| v.to_bits()).collect())
        .collect();
    (losses, params)
}

#[test]
fn fifty_steps_replay_bitwise() {
    for v in Variant::ALL {
        let a = train_run(v, 50);
        let b = train_run(v, 50);
        assert_eq!(a, b, "{v}");
    }
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let mut m = LanguageModel::<f64>::new(small(Variant::S2moe, 2)).unwrap();
    let mut adam = Adam::new(
        AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        m.params(),
    );
    let x: Vec<usize> = (0..16).map(|i| i % 7).collect();
    let y: Vec<usize> = (1..17).map(|i| i % 7).collect();
    let mut tape = Tape::new();
    let mut first = None;
    let mut last = 0.0;
    for step in 0..60 {
        m.begin_step(step).unwrap();
        let (loss, _, grads) = m.loss_and_grads(&mut tape, &x, &y, 2).unwrap();
        first.get_or_insert(loss.task_nats);
        last = loss.task_nats;
        adam.step(&mut m.params_mut(), &grads);
    }
    assert!(last < 0.5 * first.unwrap(), "{first:?} -> {last}");
}

#[test]
fn f32_tracks_f64() {
    let mut m = LanguageModel::<f64>::new(small(Variant::Xmoe, 6)).unwrap();
    scramble(&mut m, 7);
    let mut m32 = m.convert::<f32>().unwrap();
    let toks = tokens(8, 16, 7);
    let want = logits(&mut m, &toks, 2, Mode::Eval);
    let mut tape = Tape::<f32>::new();
    let out = m32.forward(&mut tape, &toks, 2, Mode::Eval).unwrap();
    assert!(max_abs_diff(&tape.value(out.logits).to_f64(), &want) < 1e-4);
}
