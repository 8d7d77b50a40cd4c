mod common;

use common::{rng, softmax, tensor, weighted_sum};
use proptest::prelude::*;
use rand::Rng;
use s2moe::optim::{Adam, AdamConfig};
use s2moe::routing::{
    dropout_schedule_k, route_scores, stablemoe_mode, topk_mask, RouterDecision, Router, RouterKind, RoutingError,
    StableMode,
};
use s2moe::tensor::{Tape, Tensor};

const KINDS: [RouterKind; 4] = [RouterKind::Smoe, RouterKind::SmoeDropout, RouterKind::Xmoe, RouterKind::StableMoe];

fn router(kind: RouterKind, n: usize, d: usize, seed: u64) -> Router<f64> {
    Router::new("r", kind, n, d, (d / 2).max(1), 0.07, 10, 0.5, seed).unwrap()
}

fn check_decision(dec: &RouterDecision, k: usize) {
    dec.validate().unwrap();
    for t in 0..dec.tokens {
        let p = dec.probs_row(t);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row {t} sums to {s}");
        assert!(p.iter().all(|&v| v >= 0.0));
        let g = dec.gates_row(t);
        assert_eq!(g.iter().filter(|&&v| v != 0.0).count(), k, "row {t}: {g:?}");
        for &i in dec.selected(t) {
            assert_eq!(g[i], p[i]);
            assert!((0.0..=1.0).contains(&g[i]));
        }
    }
}

#[test]
fn zero_embeddings_route_uniformly() {
    let mut r = router(RouterKind::Smoe, 5, 6, 1);
    r.w_e_mut().unwrap().set_value(Tensor::zeros(&[5, 6]));
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(tensor(&mut rng(2), &[7, 6], -1.0, 1.0));
    let routed = r.route(&mut tape, x, 2).unwrap();
    assert!(routed.decision.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn fixed_scores_select_the_two_largest() {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::from_f64(&[1, 4], &[2.0, 1.0, 0.0, -1.0]).unwrap());
    let routed = route_scores(&mut tape, s, 2).unwrap();
    let want = softmax(&[2.0, 1.0, 0.0, -1.0]);
    let d = &routed.decision;
    assert_eq!(d.selected(0), &[0, 1]);
    assert!((d.gates[0] - want[0]).abs() < 1e-15);
    assert!((d.gates[1] - want[1]).abs() < 1e-15);
    assert_eq!(&d.gates[2..], &[0.0, 0.0]);
}

#[test]
fn full_selection_keeps_every_probability() {
    for kind in KINDS {
        let mut r = router(kind, 4, 8, 3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(&mut rng(4), &[9, 8], -1.0, 1.0));
        let d = r.route(&mut tape, x, 4).unwrap().decision;
        assert_eq!(d.gates, d.probs, "{kind:?}");
    }
}

#[test]
fn topk_examples() {
    assert_eq!(topk_mask(&[0.4, 0.3, 0.2, 0.1], 2), (vec![0, 1], vec![0.4, 0.3, 0.0, 0.0]));
    assert_eq!(topk_mask(&[0.25; 4], 1).0, vec![0]);
    let row = [0.05, 0.6, 0.1, 0.25];
    assert_eq!(topk_mask(&row, 4).1, row.to_vec());
}

#[test]
fn out_of_range_k_and_bad_settings_rejected() {
    let mut r = router(RouterKind::Smoe, 4, 8, 1);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 8]));
    assert!(matches!(r.route(&mut tape, x, 0), Err(RoutingError::KOutOfRange { k: 0, n: 4 })));
    assert!(matches!(r.route(&mut tape, x, 5), Err(RoutingError::KOutOfRange { k: 5, n: 4 })));
    let bad = |tau: f64| Router::<f64>::new("r", RouterKind::Xmoe, 4, 8, 4, tau, 0, 0.1, 0);
    assert!(matches!(bad(0.0), Err(RoutingError::BadTemperature(_))));
    assert!(matches!(bad(-1.0), Err(RoutingError::BadTemperature(_))));
    assert!(matches!(
        Router::<f64>::new("r", RouterKind::Xmoe, 4, 8, 8, 0.07, 0, 0.1, 0),
        Err(RoutingError::BadLowDim { .. })
    ));
    assert!(matches!(
        Router::<f64>::new("r", RouterKind::Smoe, 1, 8, 4, 0.07, 0, 0.1, 0),
        Err(RoutingError::TooFewExperts(1))
    ));
}

#[test]
fn xmoe_temperature_starts_at_configured_value() {
    let r = router(RouterKind::Xmoe, 4, 8, 0);
    assert!((r.temperature().unwrap() - 0.07).abs() < 1e-12);
}

#[test]
fn xmoe_scores_are_scaled_cosines() {
    let mut r = router(RouterKind::Xmoe, 4, 8, 5);
    let x = tensor(&mut rng(6), &[3, 8], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let s = r.scores(&mut tape, xv).unwrap();
    let got = tape.value(s).to_f64();
    let p = r.params();
    let (down, emb) = (p[0].value().to_f64(), p[1].value().to_f64());
    let d_low = 4;
    for t in 0..3 {
        let h: Vec<f64> = (0..d_low)
            .map(|j| (0..8).map(|c| x.data()[t * 8 + c] * down[j * 8 + c]).sum())
            .collect();
        let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..4 {
            let e = &emb[i * d_low..(i + 1) * d_low];
            let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = h.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / (hn * en);
            assert!((got[t * 4 + i] - cos / 0.07).abs() < 1e-9);
        }
    }
}

#[test]
fn schedule_examples() {
    assert_eq!(dropout_schedule_k(0, 100, 16).unwrap(), 1);
    assert_eq!(dropout_schedule_k(100, 100, 16).unwrap(), 16);
    assert_eq!(dropout_schedule_k(50, 100, 16).unwrap(), 8);
    assert_eq!(dropout_schedule_k(1, 100, 16).unwrap(), 1);
    assert_eq!(dropout_schedule_k(0, 0, 16), Err(RoutingError::ZeroTotalSteps));
}

#[test]
fn stablemoe_mode_examples() {
    assert_eq!(stablemoe_mode(9, 10), StableMode::Learned);
    assert_eq!(stablemoe_mode(10, 10), StableMode::Frozen);
    assert_eq!(stablemoe_mode(11, 10), StableMode::Frozen);
}

/// Trains a bare router on `sum(probs ⊙ w)` for `steps` Adam steps and
/// returns the `W_e` value after each step.
fn train_router(r: &mut Router<f64>, steps: usize) -> Vec<Tensor<f64>> {
    let mut data = rng(77);
    let mut adam = Adam::new(
        AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        r.params(),
    );
    let mut history = Vec::new();
    let mut tape = Tape::<f64>::new();
    for step in 0..steps {
        r.begin_step(step);
        tape.clear();
        let x = tape.constant(tensor(&mut data, &[6, 8], -1.0, 1.0));
        let w = tensor(&mut data, &[6, 4], -1.0, 1.0);
        let routed = r.route(&mut tape, x, 2).unwrap();
        let loss = weighted_sum(&mut tape, routed.probs, &w).unwrap();
        let grads: Vec<Option<Tensor<f64>>> = if tape.requires_grad(loss) {
            tape.backward(loss).unwrap();
            r.params().iter().map(|p| p.grad(&tape).cloned()).collect()
        } else {
            vec![None; r.params().len()]
        };
        let mut params = r.params_mut();
        adam.step(&mut params, &grads);
        history.push(r.params()[0].value().clone());
    }
    history
}

#[test]
fn stablemoe_snapshots_exactly_once_and_then_holds() {
    let mut r = Router::<f64>::new("r", RouterKind::StableMoe, 4, 8, 4, 0.07, 40, 0.5, 3).unwrap();
    let start = r.w_e().unwrap().value().clone();
    let hist = train_router(&mut r, 100);
    assert_eq!(r.snapshot_events(), 1);
    assert_ne!(hist[0], start, "stage one trains the router");
    assert_ne!(hist[38], hist[39], "still learning before the boundary");
    let snap = r.snapshot().unwrap().clone();
    assert_eq!(snap, hist[39]);
    for h in &hist[40..] {
        assert_eq!(h, &snap);
    }
    assert!(r.is_frozen());
}

#[test]
fn frozen_router_never_moves() {
    let mut r = router(RouterKind::SmoeDropout, 4, 8, 9);
    assert!(r.is_frozen());
    let start = r.w_e().unwrap().value().clone();
    let hist = train_router(&mut r, 20);
    let bytes = |t: &Tensor<f64>| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    for h in &hist {
        assert_eq!(bytes(h), bytes(&start));
    }
}

#[test]
fn learned_router_gets_gradient() {
    let mut r = router(RouterKind::Smoe, 4, 8, 9);
    let start = r.w_e().unwrap().value().clone();
    let hist = train_router(&mut r, 3);
    assert_ne!(hist[2], start);
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn kept_set_maximises_total_probability(
        raw in prop::collection::vec(0u8..6, 2..=6),
        k_frac in 0.0f64..1.0,
    ) {
        // small integer levels force plenty of ties
        let z: f64 = raw.iter().map(|&v| v as f64 + 1.0).sum();
        let p: Vec<f64> = raw.iter().map(|&v| (v as f64 + 1.0) / z).collect();
        let n = p.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let (idx, gates) = topk_mask(&p, k);
        let kept: f64 = idx.iter().map(|&i| p[i]).sum();
        let best = subsets(n, k)
            .iter()
            .map(|s| s.iter().map(|&i| p[i]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((kept - best).abs() < 1e-12);
        // tie rule: among equal values the lower index wins
        for &i in &idx {
            for j in 0..i {
                prop_assert!(!(p[j] == p[i] && !idx.contains(&j)), "index {i} kept over tied {j}");
            }
        }
        prop_assert_eq!(gates.iter().filter(|&&g| g != 0.0).count(), k);
    }

    #[test]
    fn decisions_hold_invariants_for_every_variant(
        kind in 0..4usize,
        n in 2usize..=8,
        d in 2usize..=16,
        m in 1usize..=20,
        k_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mut r = router(KINDS[kind], n, d, seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(&mut rng(seed ^ 1), &[m, d], -2.0, 2.0));
        let d = r.route(&mut tape, x, k).unwrap().decision;
        check_decision(&d, k);
    }

    #[test]
    fn shifting_scores_changes_nothing(
        n in 2usize..=8,
        m in 1usize..=10,
        k_frac in 0.0f64..1.0,
        shift in -20.0f64..20.0,
        seed in any::<u64>(),
    ) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mut r = rng(seed);
        let s = common::uniform(&mut r, m * n, -3.0, 3.0);
        let shifted: Vec<f64> = s.iter().map(|v| v + shift).collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[m, n], &s).unwrap());
        let b = tape.constant(Tensor::from_f64(&[m, n], &shifted).unwrap());
        let da = route_scores(&mut tape, a, k).unwrap().decision;
        let db = route_scores(&mut tape, b, k).unwrap().decision;
        prop_assert!(common::max_abs_diff(&da.probs, &db.probs) < 1e-12);
        prop_assert!(common::max_abs_diff(&da.gates, &db.gates) < 1e-12);
        prop_assert_eq!(da.indices, db.indices);
    }

    #[test]
    fn schedule_is_monotone_and_clamped(total in 1usize..500, n in 1usize..=16) {
        let mut last = 0;
        for step in 0..=total {
            let k = dropout_schedule_k(step, total, n).unwrap();
            prop_assert!((1..=n).contains(&k));
            prop_assert!(k >= last);
            last = k;
        }
        prop_assert_eq!(last, n);
    }
}

#[test]
fn random_scores_have_distinct_indices() {
    let mut r = rng(5);
    for _ in 0..100 {
        let n = r.random_range(2..=8);
        let k = r.random_range(1..=n);
        let p = softmax(&common::uniform(&mut r, n, -1.0, 1.0));
        let dec = RouterDecision::from_probs(p, n, k).unwrap();
        check_decision(&dec, k);
    }
}
