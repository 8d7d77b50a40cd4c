#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2moe::model::ModelError;
use s2moe::stochastic::NoiseDraw;
use s2moe::tensor::{grad_check, Tape, Tensor, TensorError, Var};
use s2moe::{LanguageModel, Mode, ModelConfig, NoiseSource, Variant};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &uniform(r, n, lo, hi)).unwrap()
}

/// `sum(y ⊙ w)` for a fixed weight tensor, so every output coordinate matters.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var, TensorError> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Row-major `[m, k] x [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn repo_root() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn corpus_path() -> std::path::PathBuf {
    repo_root().join("data/shakespeare-1mb.txt")
}

/// Hand-rolled `W2ᵀ relu(W1ᵀ x + b1) + b2` for one token.
pub fn expert_oracle(ex: &s2moe::experts::Experts<f64>, i: usize, x: &[f64]) -> Vec<f64> {
    let [w1, b1, w2, b2] = ex.expert(i).map(|p| p.value().to_f64());
    let d = x.len();
    let h = b1.len();
    let hidden: Vec<f64> = (0..h)
        .map(|j| (b1[j] + (0..d).map(|c| x[c] * w1[c * h + j]).sum::<f64>()).max(0.0))
        .collect();
    (0..d).map(|c| b2[c] + (0..h).map(|j| hidden[j] * w2[j * d + c]).sum::<f64>()).collect()
}

/// Dense SMoE over every row of `x` with a linear router: softmax of
/// `W_e x`, top-`k` by value (lowest index on ties), every expert evaluated.
pub fn smoe_oracle(layer: &s2moe::MoeLayer<f64>, x: &[f64], d: usize, k: usize) -> (Vec<f64>, Vec<Vec<usize>>) {
    let w_e = layer.router.w_e().expect("linear router").value().to_f64();
    let n = layer.n_experts();
    let mut out = Vec::with_capacity(x.len());
    let mut chosen = Vec::new();
    for row in x.chunks(d) {
        let scores: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|c| w_e[i * d + c] * row[c]).sum())
            .collect();
        let p = softmax(&scores);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
        order.truncate(k);
        let mut y = vec![0.0; d];
        for i in 0..n {
            let g = if order.contains(&i) { p[i] } else { 0.0 };
            for (o, v) in y.iter_mut().zip(expert_oracle(&layer.experts, i, row)) {
                *o += g * v;
            }
        }
        out.extend(y);
        chosen.push(order);
    }
    (out, chosen)
}

/// Replaces every parameter with draws wide enough to make routing and
/// attention non-trivial.
pub fn scramble(m: &mut LanguageModel<f64>, seed: u64) {
    let mut r = rng(seed);
    for p in m.params_mut() {
        let base = if p.name().ends_with("gamma") { 1.0 } else { 0.0 };
        let v = p.value().clone();
        let data: Vec<f64> = v.data().iter().map(|_| base + r.random_range(-0.5..0.5)).collect();
        p.set_value(Tensor::from_f64(v.shape(), &data).unwrap());
    }
}

/// Grad check of the full objective with respect to each parameter tensor
/// of a one-layer model; returns the worst relative error.
pub fn model_grad_check(variant: Variant, seed: u64) -> f64 {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_exp: 4,
        n_experts: 2,
        k_train: 1,
        k_eval: 1,
        vocab_size: 5,
        seq_len: 4,
        d_low: 4,
        dropout: 0.0,
        variant,
        seed,
        ..Default::default()
    };
    let (batch, t) = (2, 4);
    let mut m = LanguageModel::<f64>::new(cfg).unwrap();
    scramble(&mut m, seed + 100);
    if variant == Variant::S2moe {
        let mut r = rng(seed + 200);
        let draw = NoiseDraw {
            n1: tensor(&mut r, &[batch * t, 8], 0.5, 1.5),
            n2: tensor(&mut r, &[batch * t, 8], -0.5, 0.5),
        };
        m.set_noise(NoiseSource::Fixed(draw));
    }
    let mut r = rng(seed + 300);
    let all: Vec<usize> = (0..batch * (t + 1)).map(|_| r.random_range(0..5)).collect();
    let (x, y): (Vec<usize>, Vec<usize>) = all
        .chunks(t + 1)
        .flat_map(|s| s[..t].iter().copied().zip(s[1..].iter().copied()).collect::<Vec<_>>())
        .unzip();
    let n_params = m.params().len();
    let mut worst = 0.0f64;
    for j in 0..n_params {
        let point = m.params()[j].value().clone();
        let e = grad_check(
            |tape, v| {
                m.params_mut()[j].bind(v);
                let out = m.forward(tape, &x, batch, Mode::Train).map_err(unwrap_tensor)?;
                let (total, _, _) = m.objective(tape, &out, &y).map_err(unwrap_tensor)?;
                Ok(total)
            },
            &point,
            1e-5,
        )
        .unwrap();
        m.params_mut()[j].unbind();
        worst = worst.max(e);
    }
    worst
}

pub fn unwrap_tensor(e: ModelError) -> s2moe::tensor::TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}
