//! Standardized covariate balance between treated observations and their
//! weighted controls over the lag window.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{MatchedSet, MatchedSets, SetKind};
use crate::panel::{PanelData, Series};

/// Weights to apply to a set's controls when measuring balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceWeights {
    /// The (possibly refined) weights stored on the set.
    Refined,
    /// Equal weights over all controls in the set.
    Uniform,
}

/// Standardizing scale for one covariate at one lag: the spread of the
/// treated observations' values around each period's cross-sectional mean.
/// `None` when fewer than two treated values are observed or the spread is 0.
pub fn balance_scale(panel: &PanelData, sets: &MatchedSets, covariate: &str, lag: usize) -> Result<Option<f64>> {
    let series = panel.series(covariate)?;
    let means = period_means(panel, &series);
    Ok(scale_with(&series, &means, sets, lag))
}

fn period_means(panel: &PanelData, series: &Series<'_>) -> Vec<Option<f64>> {
    (0..panel.n_periods())
        .map(|t| {
            let vals: Vec<f64> = (0..panel.n_units()).filter_map(|u| series.get(u, t)).collect();
            crate::stats::mean(&vals)
        })
        .collect()
}

fn scale_with(series: &Series<'_>, means: &[Option<f64>], sets: &MatchedSets, lag: usize) -> Option<f64> {
    let mut ss = 0.0;
    let mut n = 0usize;
    for s in sets.sets.iter().filter(|s| s.is_usable()) {
        let p = s.treated_time - lag;
        if let (Some(v), Some(m)) = (series.get(s.treated_unit, p), means[p]) {
            ss += (v - m).powi(2);
            n += 1;
        }
    }
    if n < 2 {
        return None;
    }
    let sd = (ss / (n - 1) as f64).sqrt();
    (sd > 0.0).then_some(sd)
}

fn raw_difference(series: &Series<'_>, set: &MatchedSet, lag: usize, weights: BalanceWeights) -> Option<f64> {
    let p = set.treated_time - lag;
    let treated = series.get(set.treated_unit, p)?;
    // Equal positive weights are evaluated as a plain mean, so an unrefined
    // set gives bit-identical refined and uniform columns.
    let first = set.weights.iter().copied().find(|&w| w > 0.0);
    let flat = set.weights.iter().all(|&w| w == 0.0 || Some(w) == first);
    let mut acc = 0.0;
    let mut total = 0.0;
    for (&c, &w) in set.controls.iter().zip(&set.weights) {
        let w = match weights {
            BalanceWeights::Refined if flat => f64::from(u8::from(w > 0.0)),
            BalanceWeights::Refined => w,
            BalanceWeights::Uniform => 1.0,
        };
        if w == 0.0 {
            continue;
        }
        if let Some(v) = series.get(c, p) {
            acc += w * v;
            total += w;
        }
    }
    (total > 0.0).then(|| treated - acc / total)
}

/// Standardized difference between the treated observation of `set` and its
/// weighted controls for `covariate` at `lag` periods before treatment.
/// Controls lacking the value are dropped and the remaining weights
/// renormalized. `None` when the treated value is missing or the scale is
/// undefined.
pub fn unit_balance(
    panel: &PanelData,
    sets: &MatchedSets,
    index: usize,
    covariate: &str,
    lag: usize,
    weights: BalanceWeights,
) -> Result<Option<f64>> {
    let Some(scale) = balance_scale(panel, sets, covariate, lag)? else {
        return Ok(None);
    };
    let series = panel.series(covariate)?;
    Ok(raw_difference(&series, &sets.sets[index], lag, weights).map(|d| d / scale))
}

/// Mean standardized balance per pre-treatment period and covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub label: String,
    pub qoi: SetKind,
    /// Row labels `t_L` down to `t_0`.
    pub periods: Vec<String>,
    pub covariates: Vec<String>,
    /// `refined[row][covariate]`.
    pub refined: Vec<Vec<Option<f64>>>,
    pub unrefined: Option<Vec<Vec<Option<f64>>>>,
}

/// Balance for `covariates` at lags `L..=0`, averaged over usable matched
/// sets. With `include_unrefined`, the same measure under uniform weights
/// is added, standardized by the same scale.
pub fn aggregate_balance(
    panel: &PanelData,
    sets: &MatchedSets,
    covariates: &[String],
    include_unrefined: bool,
) -> Result<BalanceTable> {
    if !sets.sets.iter().any(MatchedSet::is_usable) {
        return Err(Error::NoUsableTreated(format!("{} balance", sets.kind.as_str())));
    }
    let lag = sets.spec.lag;
    let lags: Vec<usize> = (0..=lag).rev().collect();
    let mut refined = vec![vec![None; covariates.len()]; lags.len()];
    let mut unrefined = vec![vec![None; covariates.len()]; lags.len()];
    for (j, name) in covariates.iter().enumerate() {
        let series = panel.series(name)?;
        let means = period_means(panel, &series);
        for (r, &l) in lags.iter().enumerate() {
            let Some(scale) = scale_with(&series, &means, sets, l) else {
                continue;
            };
            let mean_of = |w| {
                let vals: Vec<f64> = sets
                    .sets
                    .iter()
                    .filter(|s| s.is_usable())
                    .filter_map(|s| raw_difference(&series, s, l, w))
                    .map(|d| d / scale)
                    .collect();
                crate::stats::mean(&vals)
            };
            refined[r][j] = mean_of(BalanceWeights::Refined);
            if include_unrefined {
                unrefined[r][j] = mean_of(BalanceWeights::Uniform);
            }
        }
    }
    Ok(BalanceTable {
        label: sets.kind.as_str().to_string(),
        qoi: sets.kind,
        periods: lags.iter().map(|l| format!("t_{l}")).collect(),
        covariates: covariates.to_vec(),
        refined,
        unrefined: include_unrefined.then_some(unrefined),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl BalanceTable {
    pub fn with_label(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }

    /// Rows `t_L..t_0`; refined columns, then `<name>_unrefined` columns.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["period".to_string()];
        header.extend(self.covariates.iter().cloned());
        if self.unrefined.is_some() {
            header.extend(self.covariates.iter().map(|c| format!("{c}_unrefined")));
        }
        w.write_record(&header)?;
        for (r, period) in self.periods.iter().enumerate() {
            let mut row = vec![period.clone()];
            row.extend(self.refined[r].iter().map(|&v| fmt_opt(v)));
            if let Some(u) = &self.unrefined {
                row.extend(u[r].iter().map(|&v| fmt_opt(v)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Largest absolute balance over every cell, ignoring missing cells.
    pub fn max_abs(&self, unrefined: bool) -> Option<f64> {
        let grid = if unrefined { self.unrefined.as_ref()? } else { &self.refined };
        grid.iter()
            .flatten()
            .flatten()
            .map(|v| v.abs())
            .reduce(f64::max)
    }
}

/// One point of the before/after balance comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub covariate: String,
    pub period: String,
    pub unrefined: Option<f64>,
    pub refined: Option<f64>,
}

/// Pairs absolute unrefined and refined balance per (covariate, period).
pub fn balance_scatter_data(table: &BalanceTable) -> Result<Vec<ScatterRow>> {
    let unrefined = table
        .unrefined
        .as_ref()
        .ok_or_else(|| Error::MissingUnrefined(table.label.clone()))?;
    let mut rows = Vec::with_capacity(table.covariates.len() * table.periods.len());
    for (j, cov) in table.covariates.iter().enumerate() {
        for (r, period) in table.periods.iter().enumerate() {
            rows.push(ScatterRow {
                covariate: cov.clone(),
                period: period.clone(),
                unrefined: unrefined[r][j].map(f64::abs),
                refined: table.refined[r][j].map(f64::abs),
            });
        }
    }
    Ok(rows)
}

pub fn write_scatter_csv<W: Write>(rows: &[ScatterRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["covariate", "period", "unrefined", "refined"])?;
    for r in rows {
        w.write_record([
            r.covariate.clone(),
            r.period.clone(),
            fmt_opt(r.unrefined),
            fmt_opt(r.refined),
        ])?;
    }
    w.flush()?;
    Ok(())
}
