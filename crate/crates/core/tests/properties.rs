//! Invariants that must hold for any panel, checked on generated inputs.

use approx::assert_abs_diff_eq;
use indexmap::IndexMap;
use panelmatch::{
    build_matched_sets, point_estimate, refine_match, set_level_effects, wstar_weights, ColumnNames,
    CovariateSpec, CovariateTerm, MatchSpec, PanelData, Qoi, RefinementMethod, RefinementSpec, UnitId,
};
use proptest::prelude::*;

const UNITS: usize = 8;
const PERIODS: usize = 7;

#[derive(Debug, Clone)]
struct Grids {
    treat: Vec<Option<bool>>,
    y: Vec<Option<f64>>,
    x: Vec<Option<f64>>,
}

fn grids() -> impl Strategy<Value = Grids> {
    let n = UNITS * PERIODS;
    (
        prop::collection::vec(prop_oneof![8 => any::<bool>().prop_map(Some), 1 => Just(None)], n),
        prop::collection::vec(prop_oneof![9 => (-10.0..10.0f64).prop_map(Some), 1 => Just(None)], n),
        prop::collection::vec(prop_oneof![9 => (-3.0..3.0f64).prop_map(Some), 1 => Just(None)], n),
    )
        .prop_map(|(treat, y, x)| Grids { treat, y, x })
}

fn panel(g: &Grids) -> PanelData {
    let mut covs = IndexMap::new();
    covs.insert("x".to_string(), g.x.clone());
    PanelData::from_grids(
        ColumnNames::new("unit", "time", "treat", "y"),
        (1..=UNITS as i64).map(UnitId::Int).collect(),
        (2000..2000 + PERIODS as i64).collect(),
        g.treat.clone(),
        g.y.clone(),
        covs,
    )
    .unwrap()
}

fn qoi() -> impl Strategy<Value = Qoi> {
    prop_oneof![Just(Qoi::Att), Just(Qoi::Art), Just(Qoi::Atc)]
}

fn method() -> impl Strategy<Value = RefinementMethod> {
    prop_oneof![
        Just(RefinementMethod::None),
        Just(RefinementMethod::Mahalanobis),
        Just(RefinementMethod::PsMatch),
        Just(RefinementMethod::PsWeight),
        Just(RefinementMethod::CbpsWeight),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn longer_history_shrinks_matched_sets(g in grids(), q in qoi(), lag in 1usize..4, missing in any::<bool>()) {
        let p = panel(&g);
        let mut short = MatchSpec::new(q, lag, vec![0]);
        short.match_missing = missing;
        let mut long = short.clone();
        long.lag = lag + 1;
        let a = build_matched_sets(&p, &short).unwrap();
        let b = build_matched_sets(&p, &long).unwrap();
        for s in &b.components[0].sets {
            let shorter = a.components[0]
                .sets
                .iter()
                .find(|o| o.treated_unit == s.treated_unit && o.treated_time == s.treated_time)
                .expect("treated observation disappears with a shorter history");
            prop_assert!(s.controls.iter().all(|c| shorter.controls.contains(c)));
        }
    }

    #[test]
    fn ate_families_are_disjoint(g in grids(), lag in 1usize..4) {
        let p = panel(&g);
        let pm = build_matched_sets(&p, &MatchSpec::new(Qoi::Ate, lag, vec![0])).unwrap();
        prop_assert_eq!(pm.components.len(), 2);
        for s in &pm.components[0].sets {
            prop_assert!(!pm.components[1]
                .sets
                .iter()
                .any(|o| o.treated_unit == s.treated_unit && o.treated_time == s.treated_time));
        }
    }

    #[test]
    fn treated_unit_never_its_own_control(g in grids(), q in qoi(), lag in 1usize..4) {
        let p = panel(&g);
        let pm = build_matched_sets(&p, &MatchSpec::new(q, lag, vec![0, 1])).unwrap();
        for s in &pm.components[0].sets {
            prop_assert!(!s.controls.contains(&s.treated_unit));
            prop_assert!(s.controls.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn refined_weights_form_a_distribution(g in grids(), q in qoi(), m in method(), size in 1usize..4) {
        let p = panel(&g);
        let pm = build_matched_sets(&p, &MatchSpec::new(q, 2, vec![0])).unwrap();
        let spec = RefinementSpec::new(m, CovariateSpec::new(vec![CovariateTerm::new("x", 0, 1, 1)]))
            .with_size_match(size);
        let Ok((refined, _)) = refine_match(&p, &pm, &spec) else { return Ok(()) };
        for s in refined.components[0].sets.iter().filter(|s| s.is_usable()) {
            prop_assert!(s.weights.iter().all(|&w| w >= 0.0));
            assert_abs_diff_eq!(s.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            if let (true, Some(d)) = (m.is_matching(), &s.distances) {
                let kept: Vec<f64> = s.weights.iter().copied().filter(|&w| w > 0.0).collect();
                prop_assert!(kept.len() >= size.min(d.iter().flatten().count()));
                prop_assert!(kept.iter().all(|&w| w == kept[0]));
            }
        }
    }

    #[test]
    fn weighted_outcome_sum_equals_estimate(g in grids(), q in qoi(), m in method(), lead in 0usize..3) {
        let p = panel(&g);
        let pm = build_matched_sets(&p, &MatchSpec::new(q, 2, vec![0, 1, 2])).unwrap();
        let spec = RefinementSpec::new(m, CovariateSpec::new(vec![CovariateTerm::new("x", 0, 0, 1)]));
        let Ok((refined, _)) = refine_match(&p, &pm, &spec) else { return Ok(()) };
        let sets = &refined.components[0];
        let Ok(est) = point_estimate(&p, sets, lead) else { return Ok(()) };
        let w = wstar_weights(&p, sets, lead).unwrap();
        assert_abs_diff_eq!(w.weighted_estimate(&p), est, epsilon = 1e-10);
        let effects = set_level_effects(&p, sets, &[lead]).unwrap();
        assert_abs_diff_eq!(effects.mean(0).unwrap(), est, epsilon = 1e-10);
    }

    #[test]
    fn csv_round_trip_preserves_panel(g in grids()) {
        let p = panel(&g);
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = PanelData::from_csv_reader(buf.as_slice(), p.columns()).unwrap();
        prop_assert_eq!(p.units(), q.units());
        prop_assert_eq!(p.times(), q.times());
        for u in 0..UNITS {
            for t in 0..PERIODS {
                prop_assert_eq!(p.treatment(u, t), q.treatment(u, t));
                prop_assert_eq!(p.outcome(u, t), q.outcome(u, t));
                prop_assert_eq!(p.lagged_value("x", u, t, 0).unwrap(), q.lagged_value("x", u, t, 0).unwrap());
            }
        }
    }
}
