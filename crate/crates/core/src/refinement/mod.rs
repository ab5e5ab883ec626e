//! Weighting the controls inside each matched set.

pub mod covariates;
pub mod mahalanobis;
pub mod propensity;

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use covariates::{expand_covariates, CovariateExpander, CovariateSpec, CovariateTerm, LagRange};
pub use mahalanobis::{mahalanobis_distances, SetDistances};
pub use propensity::{fit_cbps, fit_logistic, logit, FitMethod, PropensityModel};

use crate::error::{Error, Result};
use crate::matching::{MatchedSet, MatchedSets, PanelMatch};
use crate::panel::PanelData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMethod {
    None,
    Mahalanobis,
    #[serde(alias = "ps.match")]
    PsMatch,
    #[serde(alias = "CBPS.match", alias = "cbps.match")]
    CbpsMatch,
    #[serde(alias = "ps.weight")]
    PsWeight,
    #[serde(alias = "CBPS.weight", alias = "cbps.weight")]
    CbpsWeight,
}

impl RefinementMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RefinementMethod::None => "none",
            RefinementMethod::Mahalanobis => "mahalanobis",
            RefinementMethod::PsMatch => "ps_match",
            RefinementMethod::CbpsMatch => "cbps_match",
            RefinementMethod::PsWeight => "ps_weight",
            RefinementMethod::CbpsWeight => "cbps_weight",
        }
    }

    /// Matching methods keep the `size_match` nearest controls; weighting
    /// methods keep every control.
    pub fn is_matching(self) -> bool {
        matches!(
            self,
            RefinementMethod::Mahalanobis | RefinementMethod::PsMatch | RefinementMethod::CbpsMatch
        )
    }

    fn propensity_fit(self) -> Option<FitMethod> {
        match self {
            RefinementMethod::PsMatch | RefinementMethod::PsWeight => Some(FitMethod::LogisticMle),
            RefinementMethod::CbpsMatch | RefinementMethod::CbpsWeight => Some(FitMethod::Cbps),
            _ => None,
        }
    }
}

impl std::str::FromStr for RefinementMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('.', "_");
        Ok(match norm.as_str() {
            "none" => RefinementMethod::None,
            "mahalanobis" => RefinementMethod::Mahalanobis,
            "ps_match" => RefinementMethod::PsMatch,
            "cbps_match" => RefinementMethod::CbpsMatch,
            "ps_weight" => RefinementMethod::PsWeight,
            "cbps_weight" => RefinementMethod::CbpsWeight,
            _ => return Err(Error::InvalidSpec(format!("unknown refinement method `{s}`"))),
        })
    }
}

fn default_size_match() -> usize {
    5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementSpec {
    pub method: RefinementMethod,
    #[serde(default)]
    pub covariates: CovariateSpec,
    #[serde(default = "default_size_match")]
    pub size_match: usize,
    #[serde(default = "default_true")]
    pub use_diagonal_variance: bool,
}

impl RefinementSpec {
    pub fn none() -> Self {
        Self::new(RefinementMethod::None, CovariateSpec::default())
    }

    pub fn new(method: RefinementMethod, covariates: CovariateSpec) -> Self {
        Self {
            method,
            covariates,
            size_match: default_size_match(),
            use_diagonal_variance: true,
        }
    }

    pub fn with_size_match(mut self, n: usize) -> Self {
        self.size_match = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.size_match < 1 {
            return Err(Error::InvalidSpec("size_match must be at least 1".into()));
        }
        if self.method != RefinementMethod::None && self.covariates.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "refinement method `{}` needs at least one covariate",
                self.method.as_str()
            )));
        }
        self.covariates.validate()
    }
}

/// Distances are rounded results, so exact ties (a set whose points form a
/// simplex under the pseudo-inverse metric, say) can differ in the last bits.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Weights under the nearest-`size_match` rule: every control at or below
/// the `size_match`-th smallest distance (the largest distance when there
/// are fewer controls) shares weight equally, so ties at the cutoff are all
/// kept. Distances within [`TIE_TOLERANCE`] of the cutoff count as ties.
pub fn apply_matching_rule(distances: &[f64], size_match: usize) -> Vec<f64> {
    if distances.is_empty() {
        return Vec::new();
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nth = sorted[size_match.clamp(1, sorted.len()) - 1];
    let cutoff = nth + TIE_TOLERANCE * nth.abs().max(1.0);
    let k = distances.iter().filter(|&&d| d <= cutoff).count();
    distances
        .iter()
        .map(|&d| if d <= cutoff { 1.0 / k as f64 } else { 0.0 })
        .collect()
}

/// Absolute logit differences between a treated score and each control score.
pub fn ps_distances(treated_score: f64, control_scores: &[f64]) -> Vec<f64> {
    let lt = logit(treated_score);
    control_scores.iter().map(|&s| (lt - logit(s)).abs()).collect()
}

/// Weights proportional to each control's propensity odds, summing to one.
pub fn ps_weights(control_scores: &[f64]) -> Vec<f64> {
    let odds: Vec<f64> = control_scores
        .iter()
        .map(|&s| {
            let p = propensity::clamp_score(s);
            p / (1.0 - p)
        })
        .collect();
    let total: f64 = odds.iter().sum();
    odds.iter().map(|o| o / total).collect()
}

/// What refinement did to a family of matched sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementDiagnostics {
    pub method: RefinementMethod,
    pub n_sets: usize,
    pub n_empty: usize,
    /// Treated observations whose own covariates are missing.
    pub n_unrefinable: usize,
    /// Non-empty sets in which no control had complete covariates.
    pub n_without_complete_controls: usize,
    /// Controls given zero weight for missing covariates.
    pub n_controls_dropped: usize,
    pub propensity: Option<PropensityModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub sets: MatchedSets,
    pub diagnostics: RefinementDiagnostics,
}

/// Scores per control (`None` for missing covariates) and for the treated
/// observation, or `None` when the treated observation is missing.
type ScoredSet = Option<(f64, Vec<Option<f64>>)>;

fn fit_propensity(
    expander: &CovariateExpander<'_>,
    sets: &[MatchedSet],
    fit: FitMethod,
) -> Result<(PropensityModel, Vec<ScoredSet>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut seen_controls = BTreeSet::new();
    for s in sets.iter().filter(|s| !s.is_empty()) {
        let t = s.treated_time;
        if let Some(v) = expander.expand(s.treated_unit, t) {
            rows.push(v);
            labels.push(true);
        } else {
            continue;
        }
        for &c in &s.controls {
            if seen_controls.insert((c, t)) {
                if let Some(v) = expander.expand(c, t) {
                    rows.push(v);
                    labels.push(false);
                }
            }
        }
    }
    let width = expander.width();
    let x = DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]);
    let model = match fit {
        FitMethod::LogisticMle => fit_logistic(&x, &labels)?,
        FitMethod::Cbps => fit_cbps(&x, &labels)?,
    };
    let scored = sets
        .iter()
        .map(|s| {
            let t = s.treated_time;
            let treated = model.predict(&expander.expand(s.treated_unit, t)?);
            let controls = s
                .controls
                .iter()
                .map(|&c| expander.expand(c, t).map(|v| model.predict(&v)))
                .collect();
            Some((treated, controls))
        })
        .collect();
    Ok((model, scored))
}

/// Spreads `weights` (computed over the available controls) back onto all
/// controls, with zero for the unavailable ones.
fn scatter(available: &[Option<f64>], weights: &[f64]) -> Vec<f64> {
    let mut it = weights.iter();
    available
        .iter()
        .map(|a| if a.is_some() { *it.next().unwrap() } else { 0.0 })
        .collect()
}

fn weights_from_distances(distances: &[Option<f64>], size_match: usize) -> Vec<f64> {
    let avail: Vec<f64> = distances.iter().flatten().copied().collect();
    scatter(distances, &apply_matching_rule(&avail, size_match))
}

fn weights_from_scores(scores: &[Option<f64>]) -> Vec<f64> {
    let avail: Vec<f64> = scores.iter().flatten().copied().collect();
    if avail.is_empty() {
        return vec![0.0; scores.len()];
    }
    scatter(scores, &ps_weights(&avail))
}

/// Refines one family of matched sets. Controls with incomplete covariates
/// get zero weight and the remaining weights are renormalized; sets whose
/// treated observation has incomplete covariates are marked unrefinable.
pub fn refine(panel: &PanelData, sets: &MatchedSets, spec: &RefinementSpec) -> Result<Refinement> {
    spec.validate()?;
    let lag = sets.spec.lag;
    let mut out = sets.clone();
    out.refinement = Some(spec.clone());
    let n_empty = sets.sets.iter().filter(|s| s.is_empty()).count();
    let mut diagnostics = RefinementDiagnostics {
        method: spec.method,
        n_sets: sets.sets.len(),
        n_empty,
        n_unrefinable: 0,
        n_without_complete_controls: 0,
        n_controls_dropped: 0,
        propensity: None,
    };
    if spec.method == RefinementMethod::None {
        return Ok(Refinement {
            sets: out,
            diagnostics,
        });
    }

    let expander = CovariateExpander::new(panel, &spec.covariates)?;
    // Per set: Some(distances, weights) or None when the treated observation
    // cannot be refined.
    let refined: Vec<Option<(Vec<Option<f64>>, Vec<f64>)>> =
        if let Some(fit) = spec.method.propensity_fit() {
            let (model, scored) = fit_propensity(&expander, &sets.sets, fit)?;
            diagnostics.propensity = Some(model);
            scored
                .into_par_iter()
                .map(|sc| {
                    let (treated, controls) = sc?;
                    let dist: Vec<Option<f64>> = controls
                        .iter()
                        .map(|c| c.map(|s| ps_distances(treated, &[s])[0]))
                        .collect();
                    let w = if spec.method.is_matching() {
                        weights_from_distances(&dist, spec.size_match)
                    } else {
                        weights_from_scores(&controls)
                    };
                    Some((dist, w))
                })
                .collect()
        } else {
            sets.sets
                .par_iter()
                .map(|s| {
                    match mahalanobis::distances_with(&expander, s, lag, spec.use_diagonal_variance)
                    {
                        SetDistances::TreatedMissing => None,
                        SetDistances::Computed(d) => {
                            let w = weights_from_distances(&d, spec.size_match);
                            Some((d, w))
                        }
                    }
                })
                .collect()
        };

    for (set, r) in out.sets.iter_mut().zip(refined) {
        if set.is_empty() {
            continue;
        }
        match r {
            None => {
                set.refinable = false;
                set.distances = Some(vec![None; set.len()]);
                diagnostics.n_unrefinable += 1;
            }
            Some((d, w)) => {
                let dropped = d.iter().filter(|x| x.is_none()).count();
                diagnostics.n_controls_dropped += dropped;
                if dropped == set.len() {
                    diagnostics.n_without_complete_controls += 1;
                }
                set.distances = Some(d);
                set.weights = w;
            }
        }
    }

    let non_empty = diagnostics.n_sets - n_empty;
    if non_empty > 0 && !out.sets.iter().any(MatchedSet::is_usable) {
        return Err(Error::AllUnrefinable {
            total: diagnostics.n_sets,
            empty: n_empty,
            unrefinable: non_empty,
        });
    }
    Ok(Refinement {
        sets: out,
        diagnostics,
    })
}

/// Refines every family of a [`PanelMatch`].
pub fn refine_match(
    panel: &PanelData,
    pm: &PanelMatch,
    spec: &RefinementSpec,
) -> Result<(PanelMatch, Vec<RefinementDiagnostics>)> {
    let mut components = Vec::with_capacity(pm.components.len());
    let mut diags = Vec::with_capacity(pm.components.len());
    for c in &pm.components {
        let r = refine(panel, c, spec)?;
        components.push(r.sets);
        diags.push(r.diagnostics);
    }
    Ok((
        PanelMatch {
            qoi: pm.qoi,
            components,
        },
        diags,
    ))
}

/// Long-format weights table: one row per (treated key, control).
pub fn write_weights_csv<W: Write>(panel: &PanelData, sets: &MatchedSets, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["treated_key", "control_unit", "weight", "distance"])?;
    for s in &sets.sets {
        let key = s.key(panel);
        for (k, (&c, &wt)) in s.controls.iter().zip(&s.weights).enumerate() {
            let dist = s
                .distances
                .as_ref()
                .and_then(|d| d[k])
                .map_or_else(|| "NA".to_string(), |d| d.to_string());
            w.write_record([
                key.clone(),
                panel.units()[c].to_string(),
                wt.to_string(),
                dist,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
