use std::sync::Arc;

use proptest::prelude::*;

use ci3p3_core::design::{prob_exceeds, prob_in_interval, BetaParams, DoseObservation, EquivalenceInterval};
use ci3p3_core::grid::{DcCoord, DcMap, DoseGrid, PathChoice};
use ci3p3_core::isotonic::bivariate_isotonic;
use ci3p3_core::scenario::{builtin_study1, builtin_study2, classify_truth, combine};
use ci3p3_core::{Design, DesignParams, Recommendation, Stage, Trial};

fn grid_strategy() -> impl Strategy<Value = DoseGrid> {
    (1u32..=4, 1u32..=5).prop_map(|(r, c)| DoseGrid::new(r, c).unwrap())
}

fn path_strategy() -> impl Strategy<Value = PathChoice> {
    prop_oneof![Just(PathChoice::P1), Just(PathChoice::P2), Just(PathChoice::P3)]
}

fn matrix_pair(grid: DoseGrid) -> impl Strategy<Value = (DcMap<f64>, DcMap<f64>)> {
    let n = grid.len();
    (prop::collection::vec(0.0..1.0f64, n), prop::collection::vec(0.01..10.0f64, n)).prop_map(move |(y, w)| {
        (DcMap::from_fn(grid, |c| y[grid.index(c)]), DcMap::from_fn(grid, |c| w[grid.index(c)]))
    })
}

fn is_monotone(m: &DcMap<f64>) -> bool {
    m.iter().all(|(c, &v)| {
        [DcCoord::new(c.i + 1, c.j), DcCoord::new(c.i, c.j + 1)]
            .iter()
            .all(|n| m.get(*n).is_none_or(|&u| u >= v - 1e-12))
    })
}

/// Drives a trial with scripted outcomes, occasionally overriding the
/// recommendation with a random admissible combination.
fn drive(trial: &mut Trial, script: &[(u32, u8)]) {
    let cohort = trial.state().params.cohort_size;
    for &(y, pick) in script {
        let Recommendation::Assign(rec) = trial.next_assignment() else { break };
        let grid = trial.state().grid;
        let dc = if pick < 20 {
            let open: Vec<DcCoord> = grid.coords().filter(|c| !trial.state().is_excluded(*c)).collect();
            open[pick as usize % open.len()]
        } else {
            rec
        };
        trial.record_cohort(dc, y.min(cohort)).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn posterior_split_sums_to_one(y in 0u32..40, extra in 0u32..40) {
        let obs = DoseObservation::new(y, y + extra).unwrap();
        let ei = EquivalenceInterval::default();
        let p = BetaParams::UNIFORM;
        let inside = prob_in_interval(obs, &p, &ei);
        let above = prob_exceeds(obs, &p, ei.upper());
        let below = 1.0 - prob_exceeds(obs, &p, ei.lower());
        prop_assert!((inside + above + below - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isotonic_is_monotone_mean_preserving_and_idempotent(
        (values, weights) in grid_strategy().prop_flat_map(matrix_pair)
    ) {
        let fit = bivariate_isotonic(&values, &weights);
        prop_assert!(is_monotone(&fit));
        let wsum = |m: &DcMap<f64>| m.values().iter().zip(weights.values()).map(|(v, w)| v * w).sum::<f64>();
        prop_assert!((wsum(&fit) - wsum(&values)).abs() < 1e-9);
        let again = bivariate_isotonic(&fit, &weights);
        prop_assert!(fit.values().iter().zip(again.values()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn engine_invariants_hold_under_random_play(
        grid in grid_strategy(),
        ep in path_strategy(),
        skip in any::<bool>(),
        modified in any::<bool>(),
        seed in any::<u64>(),
        script in prop::collection::vec((0u32..=3, any::<u8>()), 1..40),
    ) {
        let params = DesignParams { max_n: 60, ep, skip_stage1: skip, modified_rule: modified, rng_seed: seed, ..Default::default() };
        let design = Arc::new(Design::new(grid, params).unwrap());
        let mut trial = Trial::new(design.clone());
        drive(&mut trial, &script);
        let state = trial.state();

        prop_assert!(state.enrolled() <= 60);
        if let Recommendation::Assign(dc) = trial.next_assignment() {
            prop_assert!(!state.is_excluded(dc));
            prop_assert!(grid.contains(dc));
        }
        // exclusion is upward closed
        for (c, s) in state.dcs.iter() {
            if s.excluded {
                prop_assert!(grid.upward_set(c).all(|u| state.is_excluded(u)));
            }
        }
        // stages only move forward
        let order = |s: Stage| s as u8;
        prop_assert!(state.log.windows(2).all(|w| order(w[0].stage) <= order(w[1].stage)));

        let replayed = Trial::replay(design, seed, &state.log).unwrap();
        prop_assert_eq!(replayed.state(), state);
        let reloaded = Trial::from_json(&trial.to_json()).unwrap();
        prop_assert_eq!(reloaded.state(), state);

        let result = trial.finalize();
        if let Some(sel) = result.selected {
            let cell = result.cells.iter().find(|c| c.dc == sel).unwrap();
            prop_assert!(cell.eliminated.is_none());
        }
    }

    #[test]
    fn combine_is_increasing_in_eta(a in 0.01..0.9f64, b in 0.01..0.9f64, eta in -3.0..3.0f64, step in 0.01..1.0f64) {
        let lo = combine(&[a], &[b], eta).unwrap()[DcCoord::ORIGIN];
        let hi = combine(&[a], &[b], eta + step).unwrap()[DcCoord::ORIGIN];
        prop_assert!(hi > lo);
        let indep = combine(&[a], &[b], 0.0).unwrap()[DcCoord::ORIGIN];
        prop_assert!((indep - (1.0 - (1.0 - a) * (1.0 - b))).abs() < 1e-12);
    }
}

#[test]
fn builtin_truths_partition_the_grid() {
    let ei = EquivalenceInterval::default();
    for s in builtin_study1().iter().chain(builtin_study2().iter()) {
        let m = s.matrix();
        assert!(is_monotone(m), "{}", s.id());
        let t = classify_truth(m, &ei);
        let mut all: Vec<DcCoord> = t.mtdc_set.iter().chain(&t.over_set).chain(&t.under_set).copied().collect();
        all.sort();
        assert_eq!(all, m.grid().coords().collect::<Vec<_>>(), "{}", s.id());
        if t.fallback {
            for a in &t.mtdc_set {
                for b in &t.mtdc_set {
                    assert!(a == b || !a.le_partial(b), "{}: {a} and {b} comparable", s.id());
                }
            }
        }
    }
}

#[test]
fn same_seed_same_trial() {
    let s = builtin_study2().remove(37);
    let design = Arc::new(Design::new(s.matrix().grid(), DesignParams::default()).unwrap());
    let a = ci3p3_core::simulator::run_trial(&s, &design, 11).unwrap();
    let b = ci3p3_core::simulator::run_trial(&s, &design, 11).unwrap();
    assert_eq!(a, b);
}
