mod common;

use common::{expert_oracle, max_abs_diff, rng, softmax, tensor, uniform, weighted_sum};
use proptest::prelude::*;
use s2moe::experts::Experts;
use s2moe::routing::RouterDecision;
use s2moe::tensor::{Tape, Tensor};

fn random_experts(n: usize, d: usize, d_exp: usize, seed: u64) -> Experts<f64> {
    let mut ex = Experts::new("e", n, d, d_exp, 0.5, seed);
    // non-zero biases so they are exercised
    let mut r = rng(seed ^ 0xb1a5);
    for i in 0..n {
        let [_, b1, _, b2] = ex.expert_mut(i);
        b1.set_value(tensor(&mut r, &[d_exp], -0.3, 0.3));
        b2.set_value(tensor(&mut r, &[d], -0.3, 0.3));
    }
    ex
}

/// Decision and probability tensor for random softmax rows.
fn decision(tape: &mut Tape<f64>, m: usize, n: usize, k: usize, seed: u64) -> (RouterDecision, s2moe::Var) {
    let mut r = rng(seed);
    let probs: Vec<f64> = (0..m).flat_map(|_| softmax(&uniform(&mut r, n, -2.0, 2.0))).collect();
    let p = tape.constant(Tensor::from_f64(&[m, n], &probs).unwrap());
    (RouterDecision::from_probs(probs, n, k).unwrap(), p)
}

fn dense(ex: &Experts<f64>, x: &[f64], d: usize, dec: &RouterDecision) -> Vec<f64> {
    let mut out = Vec::new();
    for (t, row) in x.chunks(d).enumerate() {
        let mut y = vec![0.0; d];
        for i in 0..dec.n_experts {
            let g = dec.gates_row(t)[i];
            for (o, v) in y.iter_mut().zip(expert_oracle(ex, i, row)) {
                *o += g * v;
            }
        }
        out.extend(y);
    }
    out
}

#[test]
fn zero_parameters_give_zero() {
    let mut ex = Experts::<f64>::new("e", 2, 4, 3, 0.0, 0);
    let mut tape = Tape::new();
    let x = tape.constant(tensor(&mut rng(1), &[3, 4], -1.0, 1.0));
    let y = ex.expert_forward(&mut tape, x, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_expert_passes_positive_input() {
    let mut ex = Experts::<f64>::new("e", 1, 4, 4, 0.0, 0);
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    ex.expert_mut(0)[0].set_value(Tensor::from_f64(&[4, 4], &eye).unwrap());
    ex.expert_mut(0)[2].set_value(Tensor::from_f64(&[4, 4], &eye).unwrap());
    let x = tensor(&mut rng(2), &[5, 4], 0.0, 2.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = ex.expert_forward(&mut tape, xv, 0).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn expert_matches_straight_line_evaluation() {
    for seed in 0..10 {
        let mut ex = random_experts(3, 4, 3, seed);
        let x = tensor(&mut rng(seed + 50), &[6, 4], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        for i in 0..3 {
            let y = ex.expert_forward(&mut tape, xv, i).unwrap();
            let want: Vec<f64> = x.data().chunks(4).flat_map(|r| expert_oracle(&ex, i, r)).collect();
            assert!(max_abs_diff(tape.value(y).data(), &want) < 1e-14);
        }
    }
}

#[test]
fn uniform_full_selection_averages_experts() {
    let mut ex = random_experts(4, 5, 6, 3);
    let x = tensor(&mut rng(4), &[3, 5], -1.0, 1.0);
    let probs = vec![0.25; 12];
    let dec = RouterDecision::from_probs(probs.clone(), 4, 4).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = tape.constant(Tensor::from_f64(&[3, 4], &probs).unwrap());
    let (y, evals) = ex.combine(&mut tape, xv, &dec, p).unwrap();
    assert_eq!(evals, 12);
    let mean: Vec<f64> = x
        .data()
        .chunks(5)
        .flat_map(|r| {
            let outs: Vec<Vec<f64>> = (0..4).map(|i| expert_oracle(&ex, i, r)).collect();
            (0..5).map(move |c| outs.iter().map(|o| o[c]).sum::<f64>() / 4.0)
        })
        .collect();
    assert!(max_abs_diff(tape.value(y).data(), &mean) < 1e-14);
}

#[test]
fn single_expert_scales_its_output() {
    let mut ex = random_experts(3, 4, 5, 8);
    let x = tensor(&mut rng(9), &[1, 4], -1.0, 1.0);
    let probs = vec![0.2, 0.7, 0.1];
    let dec = RouterDecision::from_probs(probs.clone(), 3, 1).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = tape.constant(Tensor::from_f64(&[1, 3], &probs).unwrap());
    let (y, evals) = ex.combine(&mut tape, xv, &dec, p).unwrap();
    assert_eq!(evals, 1);
    let want: Vec<f64> = expert_oracle(&ex, 1, x.data()).iter().map(|v| 0.7 * v).collect();
    assert!(max_abs_diff(tape.value(y).data(), &want) < 1e-15);
}

#[test]
fn four_experts_top_two_match_dense_sum() {
    let mut ex = random_experts(4, 4, 4, 10);
    let x = tensor(&mut rng(11), &[8, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (dec, p) = decision(&mut tape, 8, 4, 2, 12);
    let xv = tape.constant(x.clone());
    let (y, evals) = ex.combine(&mut tape, xv, &dec, p).unwrap();
    assert_eq!(evals, 16);
    assert!(max_abs_diff(tape.value(y).data(), &dense(&ex, x.data(), 4, &dec)) < 1e-12);
}

#[test]
fn inconsistent_decisions_rejected() {
    let mut ex = random_experts(3, 4, 2, 0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 4]));
    let (dec, p) = decision(&mut tape, 2, 4, 2, 1);
    assert!(ex.combine(&mut tape, x, &dec, p).is_err());
    let (mut dec, p) = decision(&mut tape, 2, 3, 1, 1);
    dec.indices[0] = 7;
    assert!(ex.combine(&mut tape, x, &dec, p).is_err());
    let (dec, p) = decision(&mut tape, 3, 3, 1, 1);
    assert!(ex.combine(&mut tape, x, &dec, p).is_err(), "token count mismatch");
}

#[test]
fn identically_routed_tokens_agree() {
    let mut ex = random_experts(4, 6, 5, 21);
    let row = tensor(&mut rng(22), &[1, 6], -1.0, 1.0);
    let x: Vec<f64> = row.data().iter().chain(row.data()).copied().collect();
    let probs = [0.1, 0.5, 0.3, 0.1, 0.1, 0.5, 0.3, 0.1];
    let dec = RouterDecision::from_probs(probs.to_vec(), 4, 2).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::from_f64(&[2, 6], &x).unwrap());
    let p = tape.constant(Tensor::from_f64(&[2, 4], &probs).unwrap());
    let (y, _) = ex.combine(&mut tape, xv, &dec, p).unwrap();
    let v = tape.value(y).data();
    assert_eq!(&v[..6], &v[6..]);
}

#[test]
fn unselected_experts_get_exactly_zero_gradient() {
    let mut ex = random_experts(5, 4, 3, 30);
    let x = tensor(&mut rng(31), &[6, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (dec, p) = decision(&mut tape, 6, 5, 1, 32);
    let xv = tape.constant(x);
    let (y, _) = ex.combine(&mut tape, xv, &dec, p).unwrap();
    let w = tensor(&mut rng(33), &[6, 4], -1.0, 1.0);
    let loss = weighted_sum(&mut tape, y, &w).unwrap();
    tape.backward(loss).unwrap();
    let used: Vec<bool> = (0..5).map(|i| (0..6).any(|t| dec.selected(t).contains(&i))).collect();
    assert!(used.iter().any(|&u| !u), "seed should leave an expert idle");
    for i in 0..5 {
        for p in ex.expert(i) {
            let g = p.grad(&tape);
            if used[i] {
                assert!(g.is_some_and(|g| g.data().iter().any(|&v| v != 0.0)), "expert {i}");
            } else {
                assert!(g.is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), "expert {i}");
            }
        }
    }
}

#[test]
fn per_token_gradient_only_reaches_chosen_expert() {
    let mut ex = random_experts(4, 4, 3, 40);
    let x = tensor(&mut rng(41), &[5, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (dec, p) = decision(&mut tape, 5, 4, 2, 42);
    let xv = tape.constant(x);
    let (y, _) = ex.combine(&mut tape, xv, &dec, p).unwrap();
    // loss touching token 0 only
    let mut w = vec![0.0; 20];
    w[..4].copy_from_slice(&[1.0, -0.5, 0.25, 2.0]);
    let loss = weighted_sum(&mut tape, y, &Tensor::from_f64(&[5, 4], &w).unwrap()).unwrap();
    tape.backward(loss).unwrap();
    for i in 0..4 {
        let chosen = dec.selected(0).contains(&i);
        let g = ex.expert(i)[3].grad(&tape);
        let nonzero = g.is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        assert_eq!(nonzero, chosen, "expert {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn sparse_combine_equals_dense_sum(
        n in 2usize..=8,
        d in 1usize..=16,
        d_exp in 1usize..=8,
        m in 1usize..=12,
        k_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mut ex = random_experts(n, d, d_exp, seed);
        let x = tensor(&mut rng(seed ^ 7), &[m, d], -1.0, 1.0);
        let mut tape = Tape::new();
        let (dec, p) = decision(&mut tape, m, n, k, seed ^ 9);
        let xv = tape.constant(x.clone());
        let (y, evals) = ex.combine(&mut tape, xv, &dec, p).unwrap();
        prop_assert_eq!(evals, (m * k) as u64);
        let want = dense(&ex, x.data(), d, &dec);
        prop_assert!(max_abs_diff(tape.value(y).data(), &want) < 1e-12);

        // same at 32-bit
        let mut ex32 = Experts::<f32>::new("e", n, d, d_exp, 0.5, seed);
        for (dst, src) in ex32.params_mut().into_iter().zip(ex.params()) {
            dst.set_value(src.value().cast());
        }
        let mut t32 = Tape::<f32>::new();
        let xv = t32.constant(x.cast());
        let p32 = t32.constant(Tensor::<f64>::from_f64(&[m, n], &dec.probs).unwrap().cast());
        let (y32, _) = ex32.combine(&mut t32, xv, &dec, p32).unwrap();
        prop_assert!(max_abs_diff(&t32.value(y32).to_f64(), &want) < 1e-6);
    }
}
