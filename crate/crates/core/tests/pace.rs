mod common;

use proptest::prelude::*;
use smartfreeze::pace::{block_perturbation, fit_slope, smooth, PaceConfig, PerturbationTrace};

fn snapshots_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (1usize..8, 1usize..12, 2usize..30).prop_flat_map(|(q, dim, extra)| {
        let n = q + extra;
        (prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), n + 1), Just(q))
    })
}

proptest! {
    #![proptest_config(common::proptest_config(100))]

    #[test]
    fn perturbation_matches_direct_formula((snaps, q) in snapshots_strategy()) {
        for end in q + 1..=snaps.len() {
            let p = block_perturbation(&snaps[..end], q).unwrap();
            let oracle = common::oracle_perturbation(&snaps[end - q - 1..end]);
            prop_assert!((p - oracle).abs() < 1e-12, "{p} vs {oracle}");
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
        }
    }

    #[test]
    fn smoothing_matches_windowed_mean(series in prop::collection::vec(0.0f64..1.0, 1..40), h in 1usize..8) {
        for r in 1..=series.len() {
            let lo = r.saturating_sub(h);
            let oracle = series[lo..r].iter().sum::<f64>() / (r - lo) as f64;
            prop_assert!((smooth(&series, h, r).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn slope_recovers_lines(a in -2.0f64..2.0, b in -1.0f64..1.0, k in 2usize..20) {
        let pts: Vec<f64> = (0..k).map(|x| a + b * x as f64).collect();
        prop_assert!((fit_slope(&pts).unwrap() - b).abs() < 1e-9);
    }

    #[test]
    fn trace_values_stay_in_unit_interval((snaps, q) in snapshots_strategy(), h in 1usize..6) {
        let mut trace = PerturbationTrace::new(q, h, 0.9);
        for s in snaps {
            trace.push_snapshot(s).unwrap();
        }
        prop_assert!(trace.perturbations.iter().chain(&trace.smoothed).all(|p| (0.0..=1.0 + 1e-12).contains(p)));
    }
}

#[test]
fn noisy_geometric_decay_freezes() {
    for seed in 0..5 {
        let snaps = common::trajectory(50, 500, 0.95, 3.0, seed);
        assert!(common::first_freeze(PaceConfig::default(), &snaps).is_some(), "seed {seed}");
    }
}

#[test]
fn aligned_geometric_decay_freezes_once_updates_vanish() {
    let snaps = common::trajectory(20, 1000, 0.8, 0.0, 1);
    let fired = common::first_freeze(PaceConfig::default(), &snaps).expect("fires");
    assert!(fired > 50, "fired at {fired} while updates were still aligned and non-zero");
}

#[test]
fn constant_direction_never_freezes() {
    for seed in 0..5 {
        let snaps = common::trajectory(50, 500, 1.0, 0.0, seed);
        assert_eq!(common::first_freeze(PaceConfig::default(), &snaps), None);
    }
}

#[test]
fn zero_updates_give_zero_perturbation() {
    let snaps = vec![vec![1.0, 2.0]; 6];
    assert_eq!(block_perturbation(&snaps, 5).unwrap(), 0.0);
}
