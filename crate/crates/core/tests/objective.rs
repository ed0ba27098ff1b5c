use std::f64::consts::LN_2;

use moeroute::moe::{SeqRecord, Unit};
use moeroute::objective::*;
use moeroute::router::{GateScores, RouterFeatures, RouterInput, RouterMLP};
use moeroute::{SeededRng, Tensor};
use proptest::prelude::*;

/// Records with random unit embeddings and random per-slot expert
/// probabilities. `t5_bias` shifts how much better T5 is on long inputs.
fn records(n: usize, d: usize, t5_bias: f64, rng: &mut SeededRng) -> Vec<SeqRecord> {
    (0..n)
        .map(|_| {
            let n_units = 1 + rng.int_range(0, 2);
            let len = rng.int_range(8, 1024);
            let domain = rng.int_range(0, 1);
            let mut slots = Vec::new();
            let units = (0..n_units)
                .map(|u| {
                    let s: Vec<usize> = (0..1 + rng.int_range(0, 2)).map(|i| u * 3 + i).collect();
                    slots.extend(s.iter().copied());
                    Unit {
                        repr: (0..d).map(|_| rng.normal()).collect(),
                        features: RouterFeatures::new(len.min(1024) as f64 / 1024.0, domain as f64).unwrap(),
                        slots: s,
                    }
                })
                .collect::<Vec<_>>();
            let k = units.iter().map(|u| u.slots.len()).sum::<usize>();
            let mut units = units;
            // Renumber slots densely.
            let mut next = 0;
            for u in &mut units {
                for s in &mut u.slots {
                    *s = next;
                    next += 1;
                }
            }
            let long = len as f64 / 1024.0;
            let pm: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.05, 0.95)).collect();
            let pt: Vec<f64> = (0..k).map(|_| (rng.uniform_range(0.05, 0.95) + t5_bias * long).clamp(0.01, 0.99)).collect();
            SeqRecord {
                len,
                domain,
                units,
                answer: vec![1; k],
                pred: [vec![1; k], vec![1; k]],
                target_logprob: [pm.iter().map(|p| p.ln()).collect(), pt.iter().map(|p| p.ln()).collect()],
                target_prob: [pm, pt],
                unit_ops: [len as u64, (len * len) as u64],
                flops: [len as u64, (len * len) as u64],
                seconds: [0.0; 2],
            }
        })
        .collect()
}

#[test]
fn ce_closed_forms() {
    let sure = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(ce_loss(&sure, &[1, 0]).unwrap(), 0.0);
    let half = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
    assert!((ce_loss(&half, &[0, 1]).unwrap() - LN_2).abs() < 1e-15);
    let p = Tensor::matrix(3, 2, vec![0.2, 0.8, 0.6, 0.4, 0.9, 0.1]).unwrap();
    let swapped = Tensor::matrix(3, 2, vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4]).unwrap();
    assert!((ce_loss(&p, &[1, 0, 0]).unwrap() - ce_loss(&swapped, &[0, 1, 0]).unwrap()).abs() < 1e-15);
    let bad = Tensor::matrix(1, 2, vec![0.7, 0.7]).unwrap();
    assert!(ce_loss(&bad, &[0]).is_err());
    let zero = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
    assert!((ce_loss(&zero, &[0]).unwrap() - 1e12f64.ln()).abs() < 1e-9);
}

#[test]
fn balance_closed_forms() {
    assert_eq!(balance_loss(&[GateScores([0.5, 0.5]); 4]), 0.0);
    let onehot = [GateScores([1.0, 0.0]), GateScores([0.0, 1.0])];
    assert!((balance_loss(&onehot) - LN_2).abs() <= 1e-12);
    assert!((balance_loss_literal(&onehot) + LN_2).abs() <= 1e-12);
}

#[test]
fn penalty_closed_forms() {
    assert_eq!(speed_penalty(&[GateScores([0.95, 0.05])], 0.08), 0.0);
    assert!((speed_penalty(&[GateScores([0.5, 0.5])], 0.08) - 0.42).abs() < 1e-15);
    let at = [GateScores([0.92, 0.08]), GateScores([1.0, 0.0])];
    assert_eq!(speed_penalty(&at, 0.08), 0.0);
}

#[test]
fn total_loss_linearity() {
    let w = LossWeights::default();
    assert_eq!((w.lambda1, w.lambda2, w.t_u), (1.0, 0.5, 0.08));
    let b = total_loss(0.3, 0.2, 0.1, &w);
    assert_eq!(b.total, 0.3 + 0.2 + 0.5 * 0.1);
    let z = total_loss(0.3, 0.2, 0.1, &LossWeights { lambda1: 0.0, lambda2: 0.0, ..w });
    assert_eq!(z.total, 0.3);
    for c in [0.5, 2.0, 8.0] {
        let scaled = total_loss(0.3, 0.2, 0.1, &LossWeights { lambda2: c * w.lambda2, ..w });
        let base = total_loss(0.3, 0.2, 0.1, &w);
        assert!(((scaled.total - 0.3 - 0.2) - c * (base.total - 0.3 - 0.2)).abs() < 1e-15);
    }
    assert!(LossWeights { lambda2: -1.0, ..w }.validate().is_err());
    assert!(LossWeights { t_u: 1.5, ..w }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn balance_is_a_nonnegative_divergence(raw in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let scores: Vec<GateScores> = raw.iter().map(|&t| GateScores([1.0 - t, t])).collect();
        let b = balance_loss(&scores);
        prop_assert!(b >= -1e-15);
        if raw.iter().any(|&t| (t - 0.5).abs() > 1e-3) {
            prop_assert!(b > 1e-7);
        }
        let flat: Vec<GateScores> = raw.iter().map(|_| GateScores([0.5, 0.5])).collect();
        prop_assert_eq!(balance_loss(&flat), 0.0);
    }

    #[test]
    fn penalty_vanishes_iff_all_below_threshold(raw in prop::collection::vec(0.0f64..=1.0, 1..20), t_u in 0.0f64..=1.0) {
        let scores: Vec<GateScores> = raw.iter().map(|&t| GateScores([1.0 - t, t])).collect();
        prop_assert_eq!(speed_penalty(&scores, t_u) == 0.0, raw.iter().all(|&t| t <= t_u));
    }
}

#[test]
fn eager_and_scalar_losses_agree() {
    let mut rng = SeededRng::new(1);
    let recs = records(12, 6, 0.3, &mut rng);
    let refs: Vec<&SeqRecord> = recs.iter().collect();
    let batch = RouterBatch::build(&refs, RouterInput::Concat, true).unwrap();
    let r = RouterMLP::init(8, 5, RouterInput::Concat, &mut rng).unwrap();
    let lw = LossWeights::default();
    let bd = router_loss(&r, &batch, &lw).unwrap();
    let scores = r.scores_batch(&batch.x).unwrap();
    assert!((bd.bal - balance_loss(&scores)).abs() < 1e-12);
    assert!((bd.pen - speed_penalty(&scores, lw.t_u)).abs() < 1e-15);
    let mut ce = 0.0;
    for (i, &u) in batch.unit_of_slot.iter().enumerate() {
        let s = scores[u];
        ce -= (s.mamba() * batch.target_prob.get(i, 0) + s.t5() * batch.target_prob.get(i, 1)).ln();
    }
    ce /= batch.unit_of_slot.len() as f64;
    assert!((bd.ce - ce).abs() < 1e-12);
    assert_eq!(bd.total, total_loss(bd.ce, bd.bal, bd.pen, &lw).total);
    let lit = router_loss(&r, &batch, &LossWeights { literal_balance: true, ..lw }).unwrap();
    assert_eq!(lit.bal, -bd.bal);
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(2);
    let mut worst: f64 = 0.0;
    for cfg in 0..120 {
        let d = 2 + cfg % 7;
        let recs = records(3 + cfg % 5, d, rng.uniform_range(-0.5, 0.5), &mut rng);
        let refs: Vec<&SeqRecord> = recs.iter().collect();
        let input = if cfg % 4 == 3 { RouterInput::FeaturesOnly } else { RouterInput::Concat };
        let batch = RouterBatch::build(&refs, input, cfg % 5 != 0).unwrap();
        let r = RouterMLP::init(input.width(d), 2 + cfg % 6, input, &mut rng).unwrap();
        let lw = LossWeights {
            lambda1: rng.uniform_range(0.0, 2.0),
            lambda2: rng.uniform_range(0.0, 2.0),
            t_u: rng.uniform_range(0.0, 0.6),
            literal_balance: cfg % 7 == 0,
            ..Default::default()
        };
        let err = router_gradcheck(&r, &batch, &lw, 1e-6).unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= 1e-5, "worst relative error {worst}");
}

#[test]
fn penalty_dominant_training_stays_on_mamba() {
    let mut rng = SeededRng::new(3);
    let train = records(200, 6, 0.4, &mut rng);
    let valid = records(40, 6, 0.4, &mut rng);
    let view = RouterView { input: RouterInput::Concat, domain_feature: true };
    let lw = LossWeights { lambda2: 100.0, ..Default::default() };
    let mut r = RouterMLP::init(8, 8, RouterInput::Concat, &mut rng).unwrap();
    let mut state = TrainState::new(RouterTrainConfig { epochs: 30, lr: 1e-2, ..Default::default() });
    train_router(&mut r, &train, &valid, view, &lw, &mut state, &mut SeededRng::new(4)).unwrap();
    let last = state.history.last().unwrap();
    assert!(last.soft_util_t5 <= lw.t_u + 0.01, "soft utilization {}", last.soft_util_t5);
    assert_eq!(last.hard_util_t5, 0.0);
}

#[test]
fn balance_dominant_training_without_signal_stays_interior() {
    let mut rng = SeededRng::new(5);
    let train = records(200, 6, 0.0, &mut rng);
    let valid = records(40, 6, 0.0, &mut rng);
    let view = RouterView { input: RouterInput::Concat, domain_feature: true };
    let lw = LossWeights { lambda1: 1.0, lambda2: 0.0, ..Default::default() };
    let mut r = RouterMLP::init(8, 8, RouterInput::Concat, &mut rng).unwrap();
    let mut state = TrainState::new(RouterTrainConfig { epochs: 10, ..Default::default() });
    train_router(&mut r, &train, &valid, view, &lw, &mut state, &mut SeededRng::new(6)).unwrap();
    let u = state.history.last().unwrap().soft_util_t5;
    assert!(u > 0.2 && u < 0.8, "soft utilization {u}");
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut rng = SeededRng::new(7);
        let train = records(50, 4, 0.3, &mut rng);
        let valid = records(10, 4, 0.3, &mut rng);
        let mut r = RouterMLP::init(6, 4, RouterInput::Concat, &mut rng).unwrap();
        let mut state = TrainState::new(RouterTrainConfig { epochs: 3, batch: 8, ..Default::default() });
        let view = RouterView { input: RouterInput::Concat, domain_feature: true };
        train_router(&mut r, &train, &valid, view, &LossWeights::default(), &mut state, &mut SeededRng::new(8)).unwrap();
        (r, epoch_csv(&state.history))
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert!(ca.starts_with(EPOCH_CSV_HEADER));
    assert_eq!(ca.lines().count(), 4);
}
