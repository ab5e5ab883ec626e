//! Standard errors, confidence intervals and the top-level estimate driver.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{contributions, UnitTotals};
use crate::error::{Error, Result};
use crate::matching::{MatchedSets, PanelMatch, Qoi};
use crate::panel::PanelData;
use crate::stats;

/// Resampling attempts per bootstrap replicate before giving up.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeMethod {
    Bootstrap,
    Conditional,
    Unconditional,
}

impl SeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SeMethod::Bootstrap => "bootstrap",
            SeMethod::Conditional => "conditional",
            SeMethod::Unconditional => "unconditional",
        }
    }
}

impl std::str::FromStr for SeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bootstrap" => Ok(SeMethod::Bootstrap),
            "conditional" => Ok(SeMethod::Conditional),
            "unconditional" => Ok(SeMethod::Unconditional),
            _ => Err(Error::InvalidSpec(format!("unknown se_method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub se_method: SeMethod,
    pub iterations: usize,
    pub seed: u64,
    pub confidence: f64,
    pub pooled: bool,
    pub moderator: Option<String>,
    pub include_placebo: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            se_method: SeMethod::Bootstrap,
            iterations: 1000,
            seed: 0,
            confidence: 0.95,
            pooled: false,
            moderator: None,
            include_placebo: false,
        }
    }
}

impl EstimateOptions {
    pub fn analytical(method: SeMethod) -> Self {
        Self {
            se_method: method,
            ..Self::default()
        }
    }

    pub fn bootstrap(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            seed,
            ..Self::default()
        }
    }

    /// Rejects option combinations that cannot be honoured for `qoi`.
    pub fn validate(&self, qoi: Qoi) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "confidence must lie strictly between 0 and 1, got {}",
                self.confidence
            )));
        }
        if self.se_method == SeMethod::Bootstrap && self.iterations < 2 {
            return Err(Error::InvalidSpec("bootstrap needs at least 2 iterations".into()));
        }
        if self.se_method != SeMethod::Bootstrap {
            if qoi == Qoi::Ate {
                return Err(Error::UnsupportedSe {
                    method: self.se_method.as_str().into(),
                    what: "the ate".into(),
                });
            }
            if self.pooled {
                return Err(Error::UnsupportedSe {
                    method: self.se_method.as_str().into(),
                    what: "pooled estimates".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadEstimate {
    /// Outcome offset from the treatment period: `F` for leads, `-l` for
    /// placebo periods.
    pub lead: i64,
    pub label: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub usable_treated_per_lead: IndexMap<String, usize>,
    pub dropped_controls: IndexMap<String, usize>,
    pub contributing_units_per_lead: IndexMap<String, usize>,
    pub bootstrap_resample_retries: usize,
    /// Analytical variances that came out negative and were set to zero.
    pub se_floored: usize,
    pub moderator_excluded_sets: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub qoi: Qoi,
    pub se_method: SeMethod,
    pub level: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub leads: Vec<LeadEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled: Option<LeadEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moderator: Option<IndexMap<String, EstimateResult>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placebo: Option<Box<EstimateResult>>,
    pub diagnostics: Diagnostics,
    /// Bootstrap replicate estimates, one vector per lead.
    #[serde(skip)]
    pub replicates: Vec<Vec<f64>>,
    /// Per-replicate mean across leads, when pooled.
    #[serde(skip)]
    pub pooled_replicates: Vec<f64>,
}

impl EstimateResult {
    pub fn lead(&self, lead: i64) -> Option<&LeadEstimate> {
        self.leads.iter().find(|l| l.lead == lead)
    }

    /// Usable treated observations at the first lead (across families).
    pub fn usable_treated(&self) -> usize {
        self.diagnostics
            .usable_treated_per_lead
            .values()
            .next()
            .copied()
            .unwrap_or(0)
    }
}

/// Weighted combination of ATT and ATC estimates by their numbers of usable
/// treated observations.
pub fn ate_estimate(att: f64, n_att: usize, atc: f64, n_atc: usize) -> Result<f64> {
    let total = n_att + n_atc;
    if total == 0 {
        return Err(Error::NoUsableTreated("the ate".into()));
    }
    let part = |v: f64, n: usize| if n == 0 { 0.0 } else { v * n as f64 };
    Ok((part(att, n_att) + part(atc, n_atc)) / total as f64)
}

pub(crate) fn offset_label(offset: isize) -> String {
    if offset >= 0 {
        format!("t+{offset}")
    } else {
        format!("t{offset}")
    }
}

struct OffsetTotals {
    totals: UnitTotals,
    /// Units with non-zero estimation weight, ascending.
    touched: Vec<usize>,
    estimate: f64,
}

fn analytical_se(
    t: &OffsetTotals,
    method: SeMethod,
    floored: &mut usize,
) -> Result<f64> {
    let n = t.touched.len();
    if n < 2 {
        return Err(Error::TooFewUnits(n));
    }
    let a: Vec<f64> = t.touched.iter().map(|&u| t.totals.a[u]).collect();
    let b: Vec<f64> = t.touched.iter().map(|&u| t.totals.b[u]).collect();
    let nf = n as f64;
    let sum_a: f64 = a.iter().sum();
    let sum_b: f64 = b.iter().sum();
    let var_a = nf * stats::sample_variance(&a).unwrap();
    let var = match method {
        SeMethod::Conditional => var_a / (sum_b * sum_b),
        SeMethod::Unconditional => {
            let var_b = nf * stats::sample_variance(&b).unwrap();
            let cov_ab = nf * stats::sample_covariance(&a, &b).unwrap();
            let r = sum_a / sum_b;
            (var_a - 2.0 * r * cov_ab + r * r * var_b) / (sum_b * sum_b)
        }
        SeMethod::Bootstrap => unreachable!("bootstrap has no closed form"),
    };
    if var < 0.0 {
        *floored += 1;
        return Ok(0.0);
    }
    Ok(var.sqrt())
}

/// Draws one bootstrap replicate: unit multiplicities from resampling all
/// units with replacement, redrawn until every offset has a treated
/// observation. Returns the per-offset estimates and the number of redraws.
fn bootstrap_replicate(
    n_units: usize,
    offsets: &[OffsetTotals],
    seed: u64,
    replicate: usize,
) -> Result<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    let mut m = vec![0.0_f64; n_units];
    'draw: for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
        m.iter_mut().for_each(|x| *x = 0.0);
        for _ in 0..n_units {
            m[rng.random_range(0..n_units)] += 1.0;
        }
        let mut vals = Vec::with_capacity(offsets.len());
        for o in offsets {
            let mut num = 0.0;
            let mut den = 0.0;
            for &u in &o.touched {
                num += m[u] * o.totals.a[u];
                den += m[u] * o.totals.b[u];
            }
            if den == 0.0 {
                continue 'draw;
            }
            vals.push(num / den);
        }
        return Ok((vals, attempt));
    }
    Err(Error::BootstrapExhausted {
        replicate,
        attempts: MAX_RESAMPLE_ATTEMPTS,
    })
}

fn percentile_interval(values: &[f64], confidence: f64) -> (f64, f64) {
    let alpha = 1.0 - confidence;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (
        stats::quantile_sorted(&sorted, alpha / 2.0),
        stats::quantile_sorted(&sorted, 1.0 - alpha / 2.0),
    )
}

/// Estimates at arbitrary outcome offsets over one or more families of
/// matched sets (two for the ATE). Offsets are `F` for leads and `-l` for
/// placebo periods; the baseline is always `t - 1`.
pub fn estimate_offsets(
    panel: &PanelData,
    components: &[&MatchedSets],
    qoi: Qoi,
    offsets: &[isize],
    opts: &EstimateOptions,
) -> Result<EstimateResult> {
    opts.validate(qoi)?;
    let mut diagnostics = Diagnostics::default();
    let mut per_offset = Vec::with_capacity(offsets.len());
    for &off in offsets {
        let label = offset_label(off);
        let mut totals = UnitTotals::new(panel.n_units());
        let mut usable = 0;
        let mut dropped = 0;
        for sets in components {
            let (c, counts) = contributions(panel, sets, off)?;
            totals.add(panel, &c);
            usable += counts.usable_treated;
            dropped += counts.dropped_controls;
        }
        if usable == 0 {
            return Err(Error::NoUsableTreated(format!("{} at {label}", qoi.as_str())));
        }
        let touched: Vec<usize> = (0..panel.n_units()).filter(|&u| totals.touched[u]).collect();
        diagnostics.usable_treated_per_lead.insert(label.clone(), usable);
        diagnostics.dropped_controls.insert(label.clone(), dropped);
        diagnostics
            .contributing_units_per_lead
            .insert(label, touched.len());
        per_offset.push(OffsetTotals {
            estimate: totals.ratio(),
            totals,
            touched,
        });
    }

    let mut leads = Vec::with_capacity(offsets.len());
    let mut replicates = Vec::new();
    let mut pooled = None;
    let mut pooled_replicates = Vec::new();
    match opts.se_method {
        SeMethod::Bootstrap => {
            let draws = (0..opts.iterations)
                .into_par_iter()
                .map(|b| bootstrap_replicate(panel.n_units(), &per_offset, opts.seed, b))
                .collect::<Result<Vec<_>>>()?;
            diagnostics.bootstrap_resample_retries = draws.iter().map(|d| d.1).sum();
            replicates = (0..offsets.len())
                .map(|k| draws.iter().map(|d| d.0[k]).collect::<Vec<f64>>())
                .collect();
            for ((&off, o), reps) in offsets.iter().zip(&per_offset).zip(&replicates) {
                let (lo, hi) = percentile_interval(reps, opts.confidence);
                leads.push(LeadEstimate {
                    lead: off as i64,
                    label: offset_label(off),
                    estimate: o.estimate,
                    se: stats::sample_sd(reps).unwrap(),
                    ci_low: lo,
                    ci_high: hi,
                });
            }
            if opts.pooled {
                pooled_replicates = draws
                    .iter()
                    .map(|d| d.0.iter().sum::<f64>() / d.0.len() as f64)
                    .collect();
                let (lo, hi) = percentile_interval(&pooled_replicates, opts.confidence);
                pooled = Some(LeadEstimate {
                    lead: offsets[0] as i64,
                    label: "pooled".into(),
                    estimate: per_offset.iter().map(|o| o.estimate).sum::<f64>() / offsets.len() as f64,
                    se: stats::sample_sd(&pooled_replicates).unwrap(),
                    ci_low: lo,
                    ci_high: hi,
                });
            }
        }
        method => {
            let z = stats::normal_critical_value(opts.confidence);
            for (&off, o) in offsets.iter().zip(&per_offset) {
                let se = analytical_se(o, method, &mut diagnostics.se_floored)?;
                leads.push(LeadEstimate {
                    lead: off as i64,
                    label: offset_label(off),
                    estimate: o.estimate,
                    se,
                    ci_low: o.estimate - z * se,
                    ci_high: o.estimate + z * se,
                });
            }
        }
    }

    let bootstrap = opts.se_method == SeMethod::Bootstrap;
    Ok(EstimateResult {
        qoi,
        se_method: opts.se_method,
        level: opts.confidence,
        iterations: bootstrap.then_some(opts.iterations),
        seed: bootstrap.then_some(opts.seed),
        leads,
        pooled,
        moderator: None,
        placebo: None,
        diagnostics,
        replicates,
        pooled_replicates,
    })
}

fn partition_by_moderator(
    panel: &PanelData,
    pm: &PanelMatch,
    name: &str,
) -> Result<(BTreeMap<String, PanelMatch>, usize)> {
    let mut parts: BTreeMap<String, PanelMatch> = BTreeMap::new();
    let mut excluded = 0;
    for (k, comp) in pm.components.iter().enumerate() {
        for s in &comp.sets {
            let Some(level) = panel.level(name, s.treated_unit, s.treated_time)? else {
                if !s.is_empty() {
                    excluded += 1;
                }
                continue;
            };
            let part = parts.entry(level).or_insert_with(|| PanelMatch {
                qoi: pm.qoi,
                components: pm
                    .components
                    .iter()
                    .map(|c| MatchedSets {
                        sets: Vec::new(),
                        ..c.clone()
                    })
                    .collect(),
            });
            part.components[k].sets.push(s.clone());
        }
    }
    Ok((parts, excluded))
}

/// Estimates the quantity of interest of `pm` at every lead of its spec,
/// with optional pooled, per-moderator-level and placebo results.
pub fn estimate(panel: &PanelData, pm: &PanelMatch, opts: &EstimateOptions) -> Result<EstimateResult> {
    opts.validate(pm.qoi)?;
    let spec = pm.spec();
    let offsets: Vec<isize> = spec.leads.iter().map(|&f| f as isize).collect();
    let comps: Vec<&MatchedSets> = pm.components.iter().collect();
    let mut result = estimate_offsets(panel, &comps, pm.qoi, &offsets, opts)?;

    if let Some(name) = &opts.moderator {
        let (parts, excluded) = partition_by_moderator(panel, pm, name)?;
        result.diagnostics.moderator_excluded_sets = excluded;
        if excluded > 0 {
            result.diagnostics.warnings.push(format!(
                "{excluded} matched sets excluded for missing moderator `{name}`"
            ));
        }
        let inner = EstimateOptions {
            moderator: None,
            include_placebo: false,
            ..opts.clone()
        };
        let mut levels = IndexMap::new();
        for (level, part) in parts {
            match estimate(panel, &part, &inner) {
                Ok(r) => {
                    levels.insert(level, r);
                }
                Err(Error::NoUsableTreated(what)) => result
                    .diagnostics
                    .warnings
                    .push(format!("moderator level `{level}` skipped: no usable treated observations for {what}")),
                Err(e) => return Err(e),
            }
        }
        result.moderator = Some(levels);
    }

    if opts.include_placebo {
        let inner = EstimateOptions {
            moderator: None,
            include_placebo: false,
            pooled: false,
            ..opts.clone()
        };
        result.placebo = Some(Box::new(crate::diagnostics::placebo_test(panel, pm, &inner)?));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ate_weighting() {
        assert_eq!(ate_estimate(2.0, 1, 0.0, 3).unwrap(), 0.5);
        assert_eq!(ate_estimate(1.5, 4, 1.5, 2).unwrap(), 1.5);
        assert_eq!(ate_estimate(f64::NAN, 0, 1.0, 2).unwrap(), 1.0);
        assert!(ate_estimate(1.0, 0, 1.0, 0).is_err());
    }

    #[test]
    fn option_validation() {
        let cond = EstimateOptions::analytical(SeMethod::Conditional);
        assert!(matches!(cond.validate(Qoi::Ate), Err(Error::UnsupportedSe { .. })));
        let pooled = EstimateOptions {
            pooled: true,
            ..cond.clone()
        };
        assert!(matches!(pooled.validate(Qoi::Att), Err(Error::UnsupportedSe { .. })));
        assert!(cond.validate(Qoi::Atc).is_ok());
        assert!(EstimateOptions::bootstrap(1, 0).validate(Qoi::Att).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(offset_label(0), "t+0");
        assert_eq!(offset_label(-2), "t-2");
    }
}
