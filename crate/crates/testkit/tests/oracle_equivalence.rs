//! The library and the exhaustive oracles agree on generated panels.

use panelmatch::{
    aggregate_balance, build_matched_sets, point_estimate, refine_match, set_level_effects, CovariateSpec,
    CovariateTerm, MatchSpec, Qoi, RefinementMethod, RefinementSpec,
};
use panelmatch_testkit::{
    brute_force_balance, brute_force_estimate, brute_force_matched_sets, brute_force_set_effects, random_panel,
    RandomPanelSpec,
};
use proptest::prelude::*;

fn panel_spec() -> impl Strategy<Value = RandomPanelSpec> {
    (2usize..10, 3usize..10, 0.1..0.7f64, 0.0..0.2f64, 0.0..0.2f64, any::<u64>()).prop_map(
        |(n_units, n_periods, treated, miss_d, miss_y, seed)| RandomPanelSpec {
            n_units,
            n_periods,
            treated_probability: treated,
            missing_treatment_probability: miss_d,
            missing_outcome_probability: miss_y,
            missing_covariate_probability: 0.05,
            seed,
            ..RandomPanelSpec::default()
        },
    )
}

fn match_spec() -> impl Strategy<Value = MatchSpec> {
    (
        prop_oneof![Just(Qoi::Att), Just(Qoi::Art), Just(Qoi::Atc), Just(Qoi::Ate)],
        1usize..3,
        prop::collection::vec(0usize..2, 1..3),
        any::<(bool, bool, bool)>(),
    )
        .prop_map(|(qoi, lag, leads, (missing, forbid, placebo))| {
            let mut s = MatchSpec::new(qoi, lag, leads);
            s.match_missing = missing;
            s.forbid_treatment_reversal = forbid;
            s.placebo_test = placebo;
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matched_sets_agree(ps in panel_spec(), ms in match_spec()) {
        let panel = random_panel(&ps);
        let fast = build_matched_sets(&panel, &ms);
        let slow = brute_force_matched_sets(&panel, &ms);
        match (fast, slow) {
            (Ok(fast), Ok(slow)) => {
                prop_assert_eq!(fast.components.len(), slow.len());
                for (f, s) in fast.components.iter().zip(&slow) {
                    prop_assert_eq!(&f.sets, &s.sets);
                }
            }
            // Specs the panel cannot hold (lag too long) are rejected by the library.
            (Err(_), _) => prop_assert!(ms.lag + ms.max_lead() >= ps.n_periods || ms.lag >= ps.n_periods),
            (Ok(_), Err(e)) => prop_assert!(false, "oracle failed: {e}"),
        }
    }

    #[test]
    fn estimates_and_balance_agree(ps in panel_spec(), ms in match_spec(), weighting in any::<bool>()) {
        let panel = random_panel(&ps);
        let mut ms = ms;
        if ms.qoi == Qoi::Ate {
            ms.qoi = Qoi::Att;
        }
        let Ok(pm) = build_matched_sets(&panel, &ms) else { return Ok(()) };
        let method = if weighting { RefinementMethod::PsWeight } else { RefinementMethod::Mahalanobis };
        let spec = RefinementSpec::new(method, CovariateSpec::new(vec![CovariateTerm::new("x1", 0, 0, 1)]))
            .with_size_match(2);
        let Ok((refined, _)) = refine_match(&panel, &pm, &spec) else { return Ok(()) };
        let sets = &refined.components[0];
        for &lead in &ms.leads {
            let fast = point_estimate(&panel, sets, lead).ok();
            let slow = brute_force_estimate(&panel, sets, lead);
            prop_assert_eq!(fast.is_some(), slow.is_some());
            if let (Some(a), Some(b)) = (fast, slow) {
                prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
        let effects = set_level_effects(&panel, sets, &ms.leads).unwrap();
        for (row, &lead) in effects.effects.iter().zip(&ms.leads) {
            let want = brute_force_set_effects(&panel, sets, lead);
            for (a, b) in row.iter().zip(want) {
                prop_assert_eq!(a.is_some(), b.is_some());
                if let (Some(a), Some(b)) = (a, b) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }
        }
        let names = ["x1".to_string(), "y".to_string()];
        if let Ok(table) = aggregate_balance(&panel, sets, &names, true) {
            for (uniform, grid) in [(false, &table.refined), (true, table.unrefined.as_ref().unwrap())] {
                let want = brute_force_balance(&panel, sets, &["x1", "y"], uniform);
                for (a, b) in grid.iter().flatten().zip(want.iter().flatten()) {
                    prop_assert_eq!(a.is_some(), b.is_some());
                    if let (Some(a), Some(b)) = (a, b) {
                        prop_assert!((a - b).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
