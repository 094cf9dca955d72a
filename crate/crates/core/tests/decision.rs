mod common;

use common::{h_oracle, rng, tally_oracle};
use proptest::prelude::*;
use rand::Rng;
use shiftguard::decision::{optimize_threshold, sweep, tally, GridSpec, ThresholdKind};

/// Scores on a 0.001 lattice in [0, 1] with correctness loosely tied to
/// the score.
fn lattice_problem(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>, Vec<u8>) {
    let mut r = rng(seed);
    let mut scores = Vec::with_capacity(n);
    let mut pred = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let k: u32 = r.random_range(0..=1000);
        let s = k as f64 / 1000.0;
        let correct = if i < 2 {
            i == 0
        } else {
            r.random::<f64>() < 0.3 + 0.6 * s
        };
        let y = u8::from(r.random::<bool>());
        scores.push(s);
        truth.push(y);
        pred.push(if correct { y } else { 1 - y });
    }
    (scores, pred, truth)
}

#[test]
fn optimum_matches_dense_grid_search() {
    let dense: Vec<f64> = (0..=10_000).map(|i| i as f64 / 10_000.0).collect();
    for seed in 0..30 {
        let (s, p, t) = lattice_problem(seed, 300);
        let correct: Vec<bool> = p.iter().zip(&t).map(|(a, b)| a == b).collect();
        for (kind, at_least) in [(ThresholdKind::ScoreAtLeast, true), (ThresholdKind::ScoreAtMost, false)] {
            let best = dense
                .iter()
                .map(|&th| h_oracle(&s, at_least, th, &correct))
                .fold(f64::MIN, f64::max);
            let got = optimize_threshold(&s, kind, &p, &t, &GridSpec::FromScores).unwrap();
            assert!((got.h - best).abs() < 1e-9, "seed {seed} {kind:?}: {} vs {best}", got.h);
            assert!((h_oracle(&s, at_least, got.theta, &correct) - got.h).abs() < 1e-9);
        }
    }
}

#[test]
fn sweep_counts_are_monotone_in_theta() {
    let grid = GridSpec::Uniform {
        lo: 0.0,
        hi: 1.0,
        points: 501,
    };
    for seed in 0..20 {
        let (s, p, t) = lattice_problem(seed, 200);
        let curve = sweep(&s, ThresholdKind::ScoreAtLeast, &p, &t, &grid).unwrap();
        for w in curve.windows(2) {
            assert!(w[0].theta < w[1].theta);
            assert!(w[1].ca_pct <= w[0].ca_pct + 1e-12);
            assert!(w[1].cr_pct >= w[0].cr_pct - 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn tally_matches_oracle_and_partitions(
        rows in prop::collection::vec((0.0f64..1.0, 0u8..2, 0u8..2), 1..100),
        theta in -0.1f64..1.1,
        at_least in any::<bool>(),
    ) {
        let s: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let p: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let t: Vec<u8> = rows.iter().map(|r| r.2).collect();
        let kind = if at_least { ThresholdKind::ScoreAtLeast } else { ThresholdKind::ScoreAtMost };
        let q = tally(&s, kind, theta, &p, &t).unwrap();
        let correct: Vec<bool> = p.iter().zip(&t).map(|(a, b)| a == b).collect();
        prop_assert_eq!((q.ca, q.cr, q.ir, q.ia), tally_oracle(&s, at_least, theta, &correct));
        prop_assert_eq!(q.ca + q.cr + q.ir + q.ia, rows.len());
    }

    #[test]
    fn optimizer_never_loses_to_any_observed_threshold(
        rows in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60),
    ) {
        let mut rows = rows;
        rows[0].1 = true;
        rows[1].1 = false;
        let s: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let correct: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let t = vec![1u8; s.len()];
        let p: Vec<u8> = correct.iter().map(|&c| u8::from(c)).collect();
        let got = optimize_threshold(&s, ThresholdKind::ScoreAtLeast, &p, &t, &GridSpec::FromScores).unwrap();
        for &th in &s {
            prop_assert!(got.h >= h_oracle(&s, true, th, &correct) - 1e-9);
        }
    }
}
