//! Difference-in-differences estimation over refined matched sets.

mod inference;

pub use inference::{
    ate_estimate, estimate, estimate_offsets, Diagnostics, EstimateOptions, EstimateResult,
    LeadEstimate, SeMethod,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{MatchedSet, MatchedSets};
use crate::panel::PanelData;

/// Tolerance on the sum of a usable set's weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// One usable treated observation at a given outcome offset, with controls
/// that have both outcomes and weights renormalized over them.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub set_index: usize,
    pub treated_unit: usize,
    /// Period of the post (or pre, for placebo) outcome.
    pub outcome_period: usize,
    /// Baseline period `t - 1`.
    pub base_period: usize,
    pub controls: Vec<(usize, f64)>,
    /// +1, or -1 for sets whose contrast is reversed.
    pub sign: f64,
}

impl Contribution {
    /// The set-level effect: signed treated change minus weighted control change.
    pub fn effect(&self, panel: &PanelData) -> f64 {
        let diff = |u| {
            panel.outcome(u, self.outcome_period).unwrap() - panel.outcome(u, self.base_period).unwrap()
        };
        let control: f64 = self.controls.iter().map(|&(c, w)| w * diff(c)).sum();
        self.sign * (diff(self.treated_unit) - control)
    }

    /// Coefficients this observation places on outcome cells `(unit, period)`.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let s = self.sign;
        [
            (self.treated_unit, self.outcome_period, s),
            (self.treated_unit, self.base_period, -s),
        ]
        .into_iter()
        .chain(self.controls.iter().flat_map(move |&(c, w)| {
            [(c, self.outcome_period, -s * w), (c, self.base_period, s * w)]
        }))
    }
}

/// Counts from filtering sets for one outcome offset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageCounts {
    pub usable_treated: usize,
    pub dropped_controls: usize,
}

pub(crate) fn check_weights(panel: &PanelData, set: &MatchedSet) -> Result<()> {
    let sum: f64 = set.weights.iter().sum();
    if set.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidWeights {
            key: set.key(panel),
            reason: format!("weights must be non-negative and sum to 1 (sum is {sum})"),
        });
    }
    Ok(())
}

/// Contribution of one set at an outcome offset relative to the treatment
/// period (`F` for leads, `-l` for placebo periods), or `None` if unusable.
pub(crate) fn contribution(
    panel: &PanelData,
    set: &MatchedSet,
    set_index: usize,
    offset: isize,
    sign: f64,
    dropped: &mut usize,
) -> Option<Contribution> {
    if !set.is_usable() {
        return None;
    }
    let t = set.treated_time;
    let outcome_period = usize::try_from(t as isize + offset).ok().filter(|&p| p < panel.n_periods())?;
    let base_period = t.checked_sub(1)?;
    let has = |u| panel.outcome(u, outcome_period).is_some() && panel.outcome(u, base_period).is_some();
    if !has(set.treated_unit) {
        return None;
    }
    let mut controls = Vec::with_capacity(set.len());
    let mut total = 0.0;
    for (&c, &w) in set.controls.iter().zip(&set.weights) {
        if w <= 0.0 {
            continue;
        }
        if has(c) {
            controls.push((c, w));
            total += w;
        } else {
            *dropped += 1;
        }
    }
    if total <= 0.0 {
        return None;
    }
    for (_, w) in &mut controls {
        *w /= total;
    }
    Some(Contribution {
        set_index,
        treated_unit: set.treated_unit,
        outcome_period,
        base_period,
        controls,
        sign,
    })
}

pub fn contributions(
    panel: &PanelData,
    sets: &MatchedSets,
    offset: isize,
) -> Result<(Vec<Contribution>, UsageCounts)> {
    let sign = sets.kind.sign();
    let mut dropped = 0;
    let mut out = Vec::new();
    for (k, s) in sets.sets.iter().enumerate() {
        if s.is_usable() {
            check_weights(panel, s)?;
        }
        if let Some(c) = contribution(panel, s, k, offset, sign, &mut dropped) {
            out.push(c);
        }
    }
    let counts = UsageCounts {
        usable_treated: out.len(),
        dropped_controls: dropped,
    };
    Ok((out, counts))
}

/// Per-unit numerator and denominator totals: `A_i = Σ_t W*_it Y_it` and
/// `B_i = Σ_t D_it`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct UnitTotals {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub touched: Vec<bool>,
}

impl UnitTotals {
    pub fn new(n_units: usize) -> Self {
        Self {
            a: vec![0.0; n_units],
            b: vec![0.0; n_units],
            touched: vec![false; n_units],
        }
    }

    pub fn add(&mut self, panel: &PanelData, contribs: &[Contribution]) {
        for c in contribs {
            self.b[c.treated_unit] += 1.0;
            for (u, p, w) in c.cells() {
                self.a[u] += w * panel.outcome(u, p).unwrap();
                if w != 0.0 {
                    self.touched[u] = true;
                }
            }
        }
    }

    pub fn ratio(&self) -> f64 {
        self.a.iter().sum::<f64>() / self.b.iter().sum::<f64>()
    }
}

fn offset_label(offset: isize) -> String {
    if offset >= 0 {
        format!("lead {offset}")
    } else {
        format!("placebo t{offset}")
    }
}

/// Point estimate at lead `lead`: the mean over usable treated observations
/// of the treated outcome change minus the weighted control change.
pub fn point_estimate(panel: &PanelData, sets: &MatchedSets, lead: usize) -> Result<f64> {
    let (c, _) = contributions(panel, sets, lead as isize)?;
    if c.is_empty() {
        return Err(Error::NoUsableTreated(offset_label(lead as isize)));
    }
    let total: f64 = c.iter().map(|x| x.effect(panel)).sum();
    Ok(total / c.len() as f64)
}

/// Estimation weights over the unit × period grid (unit-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationWeights {
    pub n_units: usize,
    pub n_periods: usize,
    pub wstar: Vec<f64>,
    pub treated: Vec<f64>,
}

impl EstimationWeights {
    /// `Σ W* Y / Σ D`, reading outcomes only where the weight is non-zero.
    pub fn weighted_estimate(&self, panel: &PanelData) -> f64 {
        let mut num = 0.0;
        for (cell, &w) in self.wstar.iter().enumerate() {
            if w != 0.0 {
                num += w * panel
                    .outcome(cell / self.n_periods, cell % self.n_periods)
                    .expect("non-zero weight on a missing outcome");
            }
        }
        num / self.treated.iter().sum::<f64>()
    }
}

/// Builds the `W*` and `D` grids for lead `lead`.
pub fn wstar_weights(panel: &PanelData, sets: &MatchedSets, lead: usize) -> Result<EstimationWeights> {
    let (c, _) = contributions(panel, sets, lead as isize)?;
    if c.is_empty() {
        return Err(Error::NoUsableTreated(offset_label(lead as isize)));
    }
    let mut out = EstimationWeights {
        n_units: panel.n_units(),
        n_periods: panel.n_periods(),
        wstar: vec![0.0; panel.n_cells()],
        treated: vec![0.0; panel.n_cells()],
    };
    for x in &c {
        out.treated[panel.cell(x.treated_unit, sets.sets[x.set_index].treated_time)] = 1.0;
        for (u, p, w) in x.cells() {
            out.wstar[panel.cell(u, p)] += w;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{build_kind, MatchSpec, Qoi, SetKind};
    use crate::panel::{ColumnNames, UnitId};
    use indexmap::IndexMap;

    /// Unit 1 switches on at period 2; unit 2 stays in control.
    fn two_unit(y: [f64; 6]) -> PanelData {
        PanelData::from_grids(
            ColumnNames::new("u", "t", "d", "y"),
            vec![UnitId::Int(1), UnitId::Int(2)],
            vec![0, 1, 2],
            vec![Some(false), Some(false), Some(true), Some(false), Some(false), Some(false)],
            y.iter().map(|&v| Some(v)).collect(),
            IndexMap::new(),
        )
        .unwrap()
    }

    fn att(p: &PanelData) -> MatchedSets {
        build_kind(p, SetKind::Att, &MatchSpec::new(Qoi::Att, 1, vec![0])).unwrap()
    }

    #[test]
    fn hand_computed_did() {
        let p = two_unit([0.0, 1.0, 4.0, 0.0, 2.0, 3.0]);
        assert_eq!(point_estimate(&p, &att(&p), 0).unwrap(), 2.0);
        let w = wstar_weights(&p, &att(&p), 0).unwrap();
        let nz: Vec<f64> = w.wstar.iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nz, vec![-1.0, 1.0, 1.0, -1.0]);
        assert_eq!(w.weighted_estimate(&p), 2.0);
    }

    #[test]
    fn constant_outcomes_give_zero() {
        let p = two_unit([5.0; 6]);
        assert_eq!(point_estimate(&p, &att(&p), 0).unwrap(), 0.0);
    }

    #[test]
    fn lead_beyond_panel_has_no_usable_treated() {
        let p = two_unit([0.0; 6]);
        assert!(matches!(point_estimate(&p, &att(&p), 1), Err(Error::NoUsableTreated(_))));
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let p = two_unit([0.0; 6]);
        let mut s = att(&p);
        s.sets[0].weights[0] = 0.5;
        assert!(matches!(point_estimate(&p, &s, 0), Err(Error::InvalidWeights { .. })));
    }

    #[test]
    fn missing_control_outcome_drops_control() {
        let mut y = vec![Some(0.0); 9];
        y[2] = Some(3.0);
        y[5] = Some(1.0);
        y[8] = None;
        let p = PanelData::from_grids(
            ColumnNames::new("u", "t", "d", "y"),
            vec![UnitId::Int(1), UnitId::Int(2), UnitId::Int(3)],
            vec![0, 1, 2],
            vec![
                Some(false), Some(false), Some(true),
                Some(false), Some(false), Some(false),
                Some(false), Some(false), Some(false),
            ],
            y,
            IndexMap::new(),
        )
        .unwrap();
        let s = att(&p);
        assert_eq!(point_estimate(&p, &s, 0).unwrap(), 2.0);
        let (_, counts) = contributions(&p, &s, 0).unwrap();
        assert_eq!(counts.dropped_controls, 1);
    }
}
