//! Treated-observation discovery and matched-set construction on exact
//! treatment histories.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelData, UnitId};
use crate::refinement::RefinementSpec;

/// Causal quantity of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Qoi {
    Att,
    Art,
    Atc,
    Ate,
}

impl Qoi {
    /// Matched-set families needed for this quantity; the ATE is estimated
    /// from the ATT and ATC families.
    pub fn set_kinds(self) -> &'static [SetKind] {
        match self {
            Qoi::Att => &[SetKind::Att],
            Qoi::Art => &[SetKind::Art],
            Qoi::Atc => &[SetKind::Atc],
            Qoi::Ate => &[SetKind::Att, SetKind::Atc],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Qoi::Att => "att",
            Qoi::Art => "art",
            Qoi::Atc => "atc",
            Qoi::Ate => "ate",
        }
    }
}

impl std::str::FromStr for Qoi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "att" => Ok(Qoi::Att),
            "art" => Ok(Qoi::Art),
            "atc" => Ok(Qoi::Atc),
            "ate" => Ok(Qoi::Ate),
            _ => Err(Error::InvalidSpec(format!("unknown qoi `{s}`"))),
        }
    }
}

/// Label of one family of matched sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    Att,
    Art,
    Atc,
}

impl SetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SetKind::Att => "att",
            SetKind::Art => "art",
            SetKind::Atc => "atc",
        }
    }

    /// Treatment status of the treated observation at (t - 1, t).
    fn transition(self) -> (bool, bool) {
        match self {
            SetKind::Att => (false, true),
            SetKind::Art => (true, false),
            SetKind::Atc => (false, false),
        }
    }

    /// Status a control must have at time t.
    pub fn control_status(self) -> bool {
        match self {
            SetKind::Att => false,
            SetKind::Art | SetKind::Atc => true,
        }
    }

    /// Orientation of the difference-in-differences contrast. The ATC
    /// compares weighted controls against the treated observation.
    pub fn sign(self) -> f64 {
        match self {
            SetKind::Att | SetKind::Art => 1.0,
            SetKind::Atc => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub qoi: Qoi,
    pub lag: usize,
    pub leads: Vec<usize>,
    #[serde(default)]
    pub match_missing: bool,
    #[serde(default)]
    pub forbid_treatment_reversal: bool,
    #[serde(default)]
    pub placebo_test: bool,
}

impl MatchSpec {
    pub fn new(qoi: Qoi, lag: usize, leads: Vec<usize>) -> Self {
        let mut leads = leads;
        leads.sort_unstable();
        leads.dedup();
        Self {
            qoi,
            lag,
            leads,
            match_missing: false,
            forbid_treatment_reversal: false,
            placebo_test: false,
        }
    }

    pub fn max_lead(&self) -> usize {
        self.leads.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self, n_periods: usize) -> Result<()> {
        if self.lag < 1 {
            return Err(Error::InvalidSpec("lag must be at least 1".into()));
        }
        if self.leads.is_empty() {
            return Err(Error::InvalidSpec("at least one lead is required".into()));
        }
        if self.leads.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("leads must be distinct and ascending".into()));
        }
        if self.lag >= n_periods {
            return Err(Error::LagTooLarge {
                lag: self.lag,
                periods: n_periods,
            });
        }
        Ok(())
    }
}

/// Controls matched to one treated observation, with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSet {
    pub treated_unit: usize,
    pub treated_time: usize,
    /// Control unit indices, ascending.
    pub controls: Vec<usize>,
    /// Weight per control, aligned with `controls`.
    pub weights: Vec<f64>,
    /// Refinement distance per control (`None` where it could not be computed).
    pub distances: Option<Vec<Option<f64>>>,
    /// False when refinement could not process the treated observation; such
    /// sets are kept for reporting but never enter estimation.
    pub refinable: bool,
}

impl MatchedSet {
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Whether the set contributes to estimation and balance.
    pub fn is_usable(&self) -> bool {
        self.refinable && !self.is_empty() && self.weights.iter().any(|&w| w > 0.0)
    }

    pub fn key(&self, panel: &PanelData) -> String {
        format!(
            "{}.{}",
            panel.units()[self.treated_unit],
            panel.times()[self.treated_time]
        )
    }

    pub fn weight_of(&self, unit: usize) -> Option<f64> {
        self.controls
            .binary_search(&unit)
            .ok()
            .map(|i| self.weights[i])
    }

    /// Returns a copy with the named controls' weights replaced. The result
    /// is not renormalized; estimation rejects sets whose weights do not sum
    /// to one.
    pub fn override_weights(
        &self,
        panel: &PanelData,
        weights: &IndexMap<UnitId, f64>,
    ) -> Result<MatchedSet> {
        let mut out = self.clone();
        for (id, &w) in weights {
            let pos = panel
                .unit_index(id)
                .and_then(|u| self.controls.binary_search(&u).ok())
                .ok_or_else(|| Error::UnknownControl {
                    key: self.key(panel),
                    unit: id.to_string(),
                })?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidWeights {
                    key: self.key(panel),
                    reason: format!("weight {w} for unit {id} is negative or not finite"),
                });
            }
            out.weights[pos] = w;
        }
        Ok(out)
    }
}

/// All matched sets of one family, ordered by treated unit then time.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSets {
    pub kind: SetKind,
    pub spec: MatchSpec,
    pub refinement: Option<RefinementSpec>,
    pub sets: Vec<MatchedSet>,
}

/// Matched sets for a quantity of interest: one family, or ATT and ATC
/// families (in that order) for the ATE.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelMatch {
    pub qoi: Qoi,
    pub components: Vec<MatchedSets>,
}

impl PanelMatch {
    pub fn spec(&self) -> &MatchSpec {
        &self.components[0].spec
    }
}

/// Order statistics over matched-set sizes, empty sets included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSizeSummary {
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
    pub n_treated: usize,
    pub n_empty: usize,
}

/// Histogram of matched-set sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeDistribution {
    pub counts: BTreeMap<usize, usize>,
    pub n_empty: usize,
}

fn is_treated(panel: &PanelData, kind: SetKind, spec: &MatchSpec, unit: usize, t: usize) -> bool {
    if t < spec.lag {
        return false;
    }
    let (before, now) = kind.transition();
    if panel.treatment(unit, t) != Some(now) || panel.treatment(unit, t - 1) != Some(before) {
        return false;
    }
    if !spec.match_missing && (1..=spec.lag).any(|l| panel.treatment(unit, t - l).is_none()) {
        return false;
    }
    if spec.forbid_treatment_reversal {
        let end = t + spec.max_lead();
        if end >= panel.n_periods() || (t..=end).any(|s| panel.treatment(unit, s) != Some(now)) {
            return false;
        }
    }
    if spec.placebo_test && (1..=spec.lag).any(|l| panel.outcome(unit, t - l).is_none()) {
        return false;
    }
    true
}

/// Treated observations `(unit, period)` for one matched-set family.
pub fn find_treated_observations(
    panel: &PanelData,
    kind: SetKind,
    spec: &MatchSpec,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for u in 0..panel.n_units() {
        for t in spec.lag..panel.n_periods() {
            if is_treated(panel, kind, spec, u, t) {
                out.push((u, t));
            }
        }
    }
    out
}

fn controls_for(
    panel: &PanelData,
    kind: SetKind,
    spec: &MatchSpec,
    unit: usize,
    t: usize,
) -> Vec<usize> {
    let status = kind.control_status();
    (0..panel.n_units())
        .filter(|&c| c != unit && panel.treatment(c, t) == Some(status))
        .filter(|&c| {
            (1..=spec.lag).all(|l| {
                let hist = panel.treatment(c, t - l);
                hist == panel.treatment(unit, t - l) && (spec.match_missing || hist.is_some())
            })
        })
        .collect()
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Builds the matched sets of one family with uniform weights.
pub fn build_kind(panel: &PanelData, kind: SetKind, spec: &MatchSpec) -> Result<MatchedSets> {
    spec.validate(panel.n_periods())?;
    let treated = find_treated_observations(panel, kind, spec);
    let sets = treated
        .par_iter()
        .map(|&(u, t)| {
            let controls = controls_for(panel, kind, spec, u, t);
            MatchedSet {
                treated_unit: u,
                treated_time: t,
                weights: uniform(controls.len()),
                controls,
                distances: None,
                refinable: true,
            }
        })
        .collect();
    Ok(MatchedSets {
        kind,
        spec: spec.clone(),
        refinement: None,
        sets,
    })
}

/// Builds every matched-set family required by `spec.qoi`.
pub fn build_matched_sets(panel: &PanelData, spec: &MatchSpec) -> Result<PanelMatch> {
    let components = spec
        .qoi
        .set_kinds()
        .iter()
        .map(|&k| build_kind(panel, k, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(PanelMatch {
        qoi: spec.qoi,
        components,
    })
}

impl MatchedSets {
    pub fn set_size_summary(&self) -> SetSizeSummary {
        let mut sizes: Vec<f64> = self.sets.iter().map(|s| s.len() as f64).collect();
        sizes.sort_by(f64::total_cmp);
        let n_empty = self.sets.iter().filter(|s| s.is_empty()).count();
        let q = |p| (!sizes.is_empty()).then(|| crate::stats::quantile_sorted(&sizes, p));
        SetSizeSummary {
            min: sizes.first().copied(),
            q1: q(0.25),
            median: q(0.5),
            mean: crate::stats::mean(&sizes),
            q3: q(0.75),
            max: sizes.last().copied(),
            n_treated: self.sets.len(),
            n_empty,
        }
    }

    pub fn size_distribution(&self) -> SizeDistribution {
        let mut counts = BTreeMap::new();
        for s in &self.sets {
            *counts.entry(s.len()).or_insert(0) += 1;
        }
        SizeDistribution {
            n_empty: counts.get(&0).copied().unwrap_or(0),
            counts,
        }
    }

    pub fn get(&self, panel: &PanelData, key: &str) -> Option<&MatchedSet> {
        self.sets.iter().find(|s| s.key(panel) == key)
    }

    pub fn to_doc(&self, panel: &PanelData) -> MatchedSetsDoc {
        let label = |u: usize| panel.units()[u].to_string();
        MatchedSetsDoc {
            qoi: self.kind,
            spec: self.spec.clone(),
            refinement: self.refinement.clone(),
            sets: self
                .sets
                .iter()
                .map(|s| MatchedSetDoc {
                    key: s.key(panel),
                    treated_unit: panel.units()[s.treated_unit].clone(),
                    treated_time: panel.times()[s.treated_time],
                    controls: s.controls.iter().map(|&c| panel.units()[c].clone()).collect(),
                    weights: s
                        .controls
                        .iter()
                        .zip(&s.weights)
                        .map(|(&c, &w)| (label(c), w))
                        .collect(),
                    distances: s.distances.as_ref().map_or_else(IndexMap::new, |d| {
                        s.controls.iter().zip(d).map(|(&c, &v)| (label(c), v)).collect()
                    }),
                    refinable: s.refinable,
                })
                .collect(),
        }
    }
}

/// JSON form of a matched-set family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSetsDoc {
    pub qoi: SetKind,
    pub spec: MatchSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub refinement: Option<RefinementSpec>,
    pub sets: Vec<MatchedSetDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSetDoc {
    pub key: String,
    pub treated_unit: UnitId,
    pub treated_time: i64,
    pub controls: Vec<UnitId>,
    pub weights: IndexMap<String, f64>,
    pub distances: IndexMap<String, Option<f64>>,
    pub refinable: bool,
}
