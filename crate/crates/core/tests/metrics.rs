use moeroute::metrics::*;
use proptest::prelude::*;

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Longest common subsequence by enumerating subsequences of `a`.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if sub.iter().all(|c| it.any(|x| x == c)) {
            best = sub.len();
        }
    }
    best
}

#[test]
fn lcs_matches_exhaustive_search() {
    let short = all_strings(4);
    for a in &short {
        for b in &short {
            assert_eq!(lcs_len(a, b), brute_lcs(a, b), "{a:?} {b:?}");
        }
    }
}

#[test]
fn rouge_matches_exhaustive_lcs_up_to_length_eight() {
    let long = all_strings(8);
    let picks: Vec<&Vec<u8>> = long.iter().filter(|s| s.len() >= 6).step_by(97).collect();
    let mut checked = 0;
    for a in long.iter().filter(|s| s.len() <= 3).chain(picks.iter().copied()) {
        for b in &picks {
            let lcs = brute_lcs(a, b) as f64;
            let r = rouge_l(a, b, 1.0).unwrap();
            let (rec, prec) = (lcs / b.len() as f64, if a.is_empty() { 0.0 } else { lcs / a.len() as f64 });
            assert_eq!(r.recall, rec);
            assert_eq!(r.precision, prec);
            let f = if rec + prec == 0.0 { 0.0 } else { 2.0 * rec * prec / (rec + prec) };
            assert!((r.score - f).abs() < 1e-15);
            checked += 1;
        }
    }
    assert!(checked > 10_000);
}

#[test]
fn rouge_examples() {
    let p: Vec<&str> = "the cat sat".split(' ').collect();
    let r: Vec<&str> = "the cat sat down".split(' ').collect();
    let s = rouge_l(&p, &r, 1.0).unwrap();
    assert_eq!((s.precision, s.recall), (1.0, 0.75));
    assert!((s.score - 6.0 / 7.0).abs() < 1e-15);
    let heavy = rouge_l(&p, &r, 1e6).unwrap();
    assert!((heavy.score - 0.75).abs() < 1e-9);
    assert_eq!(rouge_l(&p, &p, 1.2).unwrap().score, 1.0);
    assert!(rouge_l(&p, &[] as &[&str], 1.0).is_err());
    assert!(rouge_l(&p, &r, 0.0).is_err());
}

#[test]
fn token_f1_closed_forms() {
    assert!((f_measure(1.0, 0.5) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(f_measure(0.0, 0.0), 0.0);
    let f = token_f1(&["a", "b"], &["a", "b", "c", "d"]).unwrap();
    assert_eq!((f.precision, f.recall), (1.0, 0.5));
    assert!((f.f1 - 2.0 / 3.0).abs() < 1e-15);
    let dup = token_f1(&["a", "a", "a"], &["a", "b"]).unwrap();
    assert_eq!(dup.precision, 1.0 / 3.0);
    assert_eq!(dup.recall, 0.5);
    assert_eq!(token_f1::<u8>(&[], &[1]).unwrap().f1, 0.0);
    assert!(token_f1::<u8>(&[1], &[]).is_err());
}

#[test]
fn scalar_metrics() {
    assert_eq!(memory_footprint(262_144), 1.0);
    assert_eq!(memory_footprint(0), 0.0);
    assert_eq!(perplexity(0.0).unwrap(), 1.0);
    assert!((perplexity(2f64.ln()).unwrap() - 2.0).abs() < 1e-15);
    assert!(perplexity(f64::NAN).is_err());
    assert_eq!(throughput(100, 4.0).unwrap(), 25.0);
    assert!(throughput(1, 0.0).is_err());
    assert_eq!(routing_efficiency(3, 4).unwrap(), 75.0);
    assert!(routing_efficiency(5, 4).is_err());
    assert!(routing_efficiency(0, 0).is_err());
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
}

#[test]
fn log_log_slope_recovers_power_laws() {
    let xs = [256.0, 512.0, 1024.0, 2048.0];
    for k in [1.0, 2.0, 0.5] {
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(k)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() - k).abs() < 1e-12);
    }
    assert!(log_log_slope(&[1.0], &[1.0]).is_err());
    assert!(log_log_slope(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    assert!(log_log_slope(&[1.0, 2.0], &[0.0, 2.0]).is_err());
}

#[test]
fn pareto_example() {
    let mut pts = vec![
        ParetoPoint::new("mamba", 0.93, 1.0),
        ParetoPoint::new("t5", 0.97, 8.0),
        ParetoPoint::new("router", 0.98, 1.1),
        ParetoPoint::new("worse", 0.90, 2.0),
    ];
    let front = pareto_frontier(&mut pts);
    let labels: Vec<&str> = front.iter().map(|p| p.label.as_str()).collect();
    assert_eq!(labels, ["mamba", "router"]);
    assert!(pts[1].dominated && pts[3].dominated);
}

proptest! {
    #[test]
    fn pareto_is_permutation_invariant(
        raw in prop::collection::vec((0u8..5, 0u8..5), 1..12),
        seed in any::<u64>(),
    ) {
        let pts: Vec<ParetoPoint> = raw.iter().enumerate()
            .map(|(i, &(a, l))| ParetoPoint::new(format!("p{i:02}"), a as f64 / 4.0, l as f64 + 1.0))
            .collect();
        let mut shuffled = pts.clone();
        moeroute::SeededRng::new(seed).shuffle(&mut shuffled);
        let mut a = pts.clone();
        let fa = pareto_frontier(&mut a);
        let fb = pareto_frontier(&mut shuffled);
        prop_assert_eq!(&fa, &fb);
        for p in &fa {
            prop_assert!(!pts.iter().any(|q| q.dominates(p)));
        }
        for p in a.iter().filter(|p| p.dominated) {
            prop_assert!(fa.iter().any(|q| q.dominates(p)));
        }
    }

    #[test]
    fn f1_is_symmetric_and_bounded(a in prop::collection::vec(0u8..4, 1..10), b in prop::collection::vec(0u8..4, 1..10)) {
        let ab = token_f1(&a, &b).unwrap();
        let ba = token_f1(&b, &a).unwrap();
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab.f1));
        prop_assert_eq!(ab.precision, ba.recall);
    }
}
