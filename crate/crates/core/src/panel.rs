//! Long-format panel ingestion and the balanced unit × period grid.
//!
//! Every grid is stored unit-major: the cell for unit `u` at period index `t`
//! lives at `u * n_periods + t`. Period indices are consecutive integers
//! `0..T`; the original integer time labels are kept for reporting.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a unit. Integer identifiers sort numerically and are
/// emitted as JSON numbers; anything else is kept as a string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UnitId {
    Int(i64),
    Name(String),
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitId::Int(v) => write!(f, "{v}"),
            UnitId::Name(s) => f.write_str(s),
        }
    }
}

/// Names of the identifier, treatment and outcome columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnNames {
    pub unit: String,
    pub time: String,
    pub treatment: String,
    pub outcome: String,
}

impl ColumnNames {
    pub fn new(unit: &str, time: &str, treatment: &str, outcome: &str) -> Self {
        Self {
            unit: unit.to_string(),
            time: time.to_string(),
            treatment: treatment.to_string(),
            outcome: outcome.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSummary {
    pub unit_id_name: String,
    pub time_id_name: String,
    pub treatment_name: String,
    pub outcome_name: String,
    pub n_units: usize,
    pub n_periods: usize,
    pub treatment_missing_fraction: f64,
}

/// One row of the treatment-distribution export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreatmentGridRow {
    pub unit: UnitId,
    pub time: i64,
    pub treatment: Option<bool>,
    /// 1-based rank of the unit by total treatment received, ascending.
    pub rank: usize,
}

/// A balanced panel. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    columns: ColumnNames,
    units: Vec<UnitId>,
    times: Vec<i64>,
    treatment: Vec<Option<bool>>,
    outcome: Vec<Option<f64>>,
    covariates: IndexMap<String, Vec<Option<f64>>>,
    categorical: IndexMap<String, Vec<Option<String>>>,
}

/// Read-only view of one numeric variable over the grid.
#[derive(Debug, Clone)]
pub struct Series<'a> {
    values: Cow<'a, [Option<f64>]>,
    n_periods: usize,
}

impl Series<'_> {
    #[inline]
    pub fn get(&self, unit: usize, period: usize) -> Option<f64> {
        self.values[unit * self.n_periods + period]
    }

    /// Value at `period - lag`, or `None` when that precedes the panel.
    #[inline]
    pub fn lagged(&self, unit: usize, period: usize, lag: usize) -> Option<f64> {
        period.checked_sub(lag).and_then(|p| self.get(unit, p))
    }
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f == "NA"
}

fn parse_number(field: &str) -> Option<Option<f64>> {
    if is_missing(field) {
        return Some(None);
    }
    field.trim().parse::<f64>().ok().map(Some)
}

fn parse_treatment(field: &str) -> Option<Option<bool>> {
    if is_missing(field) {
        return Some(None);
    }
    match field.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Some(Some(false)),
        Ok(v) if v == 1.0 => Some(Some(true)),
        _ => None,
    }
}

struct RawRow {
    line: u64,
    unit: String,
    time: i64,
    treatment: Option<bool>,
    outcome: Option<f64>,
    extra: Vec<String>,
}

impl PanelData {
    /// Reads a long-format CSV with a header row and balances it.
    ///
    /// Empty fields and the literal `NA` are missing. Every column other than
    /// the four named ones becomes a covariate: numeric when every present
    /// value parses as a number, categorical otherwise.
    pub fn from_csv_reader<R: Read>(reader: R, columns: &ColumnNames) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let unit_col = find(&columns.unit)?;
        let time_col = find(&columns.time)?;
        let treat_col = find(&columns.treatment)?;
        let out_col = find(&columns.outcome)?;
        let extra_cols: Vec<(usize, String)> = header
            .iter()
            .enumerate()
            .filter(|(i, _)| ![unit_col, time_col, treat_col, out_col].contains(i))
            .map(|(i, h)| (i, h.trim().to_string()))
            .collect();

        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let field = |i: usize| record.get(i).unwrap_or("");
            let time_raw = field(time_col);
            let time = time_raw.trim().parse::<i64>().map_err(|_| Error::InvalidTime {
                line,
                value: time_raw.to_string(),
            })?;
            let treat_raw = field(treat_col);
            let treatment = parse_treatment(treat_raw).ok_or_else(|| Error::InvalidTreatment {
                line,
                value: treat_raw.to_string(),
            })?;
            let out_raw = field(out_col);
            let outcome = parse_number(out_raw).ok_or_else(|| Error::InvalidNumber {
                line,
                column: columns.outcome.clone(),
                value: out_raw.to_string(),
            })?;
            rows.push(RawRow {
                line,
                unit: field(unit_col).trim().to_string(),
                time,
                treatment,
                outcome,
                extra: extra_cols.iter().map(|(i, _)| field(*i).to_string()).collect(),
            });
        }
        if rows.is_empty() {
            return Err(Error::EmptyPanel);
        }

        let all_int = rows.iter().all(|r| r.unit.parse::<i64>().is_ok());
        let to_id = |s: &str| match s.parse::<i64>() {
            Ok(v) if all_int => UnitId::Int(v),
            _ => UnitId::Name(s.to_string()),
        };
        let mut units: Vec<UnitId> = rows.iter().map(|r| to_id(&r.unit)).collect();
        units.sort();
        units.dedup();
        let unit_index: HashMap<UnitId, usize> =
            units.iter().cloned().enumerate().map(|(i, u)| (u, i)).collect();

        let t_min = rows.iter().map(|r| r.time).min().unwrap_or(0);
        let t_max = rows.iter().map(|r| r.time).max().unwrap_or(0);
        let n_periods = usize::try_from(t_max - t_min + 1)
            .map_err(|_| Error::MalformedPanel("time range overflow".into()))?;
        let times: Vec<i64> = (t_min..=t_max).collect();
        let n_cells = units.len() * n_periods;

        let numeric: Vec<bool> = (0..extra_cols.len())
            .map(|j| rows.iter().all(|r| parse_number(&r.extra[j]).is_some()))
            .collect();

        let mut treatment = vec![None; n_cells];
        let mut outcome = vec![None; n_cells];
        let mut covariates: IndexMap<String, Vec<Option<f64>>> = IndexMap::new();
        let mut categorical: IndexMap<String, Vec<Option<String>>> = IndexMap::new();
        for (j, (_, name)) in extra_cols.iter().enumerate() {
            if numeric[j] {
                covariates.insert(name.clone(), vec![None; n_cells]);
            } else {
                categorical.insert(name.clone(), vec![None; n_cells]);
            }
        }

        let mut seen = vec![false; n_cells];
        for row in &rows {
            let u = unit_index[&to_id(&row.unit)];
            let t = (row.time - t_min) as usize;
            let cell = u * n_periods + t;
            if seen[cell] {
                return Err(Error::DuplicateRow {
                    unit: row.unit.clone(),
                    time: row.time,
                    line: row.line,
                });
            }
            seen[cell] = true;
            treatment[cell] = row.treatment;
            outcome[cell] = row.outcome;
            for (j, (_, name)) in extra_cols.iter().enumerate() {
                let raw = &row.extra[j];
                if numeric[j] {
                    covariates[name.as_str()][cell] = parse_number(raw).flatten();
                } else if !is_missing(raw) {
                    categorical[name.as_str()][cell] = Some(raw.clone());
                }
            }
        }

        Ok(Self {
            columns: columns.clone(),
            units,
            times,
            treatment,
            outcome,
            covariates,
            categorical,
        })
    }

    pub fn from_csv_path(path: impl AsRef<Path>, columns: &ColumnNames) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file), columns)
    }

    /// Builds a panel directly from unit-major grids.
    ///
    /// `units` must be strictly ascending and `times` consecutive integers.
    pub fn from_grids(
        columns: ColumnNames,
        units: Vec<UnitId>,
        times: Vec<i64>,
        treatment: Vec<Option<bool>>,
        outcome: Vec<Option<f64>>,
        covariates: IndexMap<String, Vec<Option<f64>>>,
    ) -> Result<Self> {
        if units.is_empty() || times.is_empty() {
            return Err(Error::EmptyPanel);
        }
        if units.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::MalformedPanel("unit ids must be strictly ascending".into()));
        }
        if times.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::MalformedPanel("times must be consecutive integers".into()));
        }
        let n_cells = units.len() * times.len();
        if treatment.len() != n_cells
            || outcome.len() != n_cells
            || covariates.values().any(|c| c.len() != n_cells)
        {
            return Err(Error::MalformedPanel(format!(
                "every grid must have {n_cells} cells"
            )));
        }
        Ok(Self {
            columns,
            units,
            times,
            treatment,
            outcome,
            covariates,
            categorical: IndexMap::new(),
        })
    }

    /// Adds a categorical column (e.g. a moderator) to the panel.
    pub fn with_categorical(mut self, name: &str, values: Vec<Option<String>>) -> Result<Self> {
        if values.len() != self.n_cells() {
            return Err(Error::MalformedPanel(format!(
                "categorical column `{name}` must have {} cells",
                self.n_cells()
            )));
        }
        self.categorical.insert(name.to_string(), values);
        Ok(self)
    }

    /// Writes the balanced grid back out in long format, one row per cell.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            self.columns.unit.clone(),
            self.columns.time.clone(),
            self.columns.treatment.clone(),
            self.columns.outcome.clone(),
        ];
        header.extend(self.covariates.keys().cloned());
        header.extend(self.categorical.keys().cloned());
        w.write_record(&header)?;
        let num = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for u in 0..self.n_units() {
            for t in 0..self.n_periods() {
                let cell = self.cell(u, t);
                let mut rec = vec![
                    self.units[u].to_string(),
                    self.times[t].to_string(),
                    match self.treatment[cell] {
                        Some(true) => "1".into(),
                        Some(false) => "0".into(),
                        None => "NA".into(),
                    },
                    num(self.outcome[cell]),
                ];
                rec.extend(self.covariates.values().map(|c| num(c[cell])));
                rec.extend(
                    self.categorical
                        .values()
                        .map(|c| c[cell].clone().unwrap_or_else(|| "NA".into())),
                );
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    #[inline]
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    #[inline]
    pub fn n_periods(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.units.len() * self.times.len()
    }

    #[inline]
    pub fn cell(&self, unit: usize, period: usize) -> usize {
        unit * self.times.len() + period
    }

    pub fn columns(&self) -> &ColumnNames {
        &self.columns
    }

    pub fn units(&self) -> &[UnitId] {
        &self.units
    }

    /// Original time labels; period index `t` has label `times()[t]`.
    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn unit_index(&self, id: &UnitId) -> Option<usize> {
        self.units.binary_search(id).ok()
    }

    pub fn period_index(&self, label: i64) -> Option<usize> {
        let first = *self.times.first()?;
        usize::try_from(label - first)
            .ok()
            .filter(|&t| t < self.times.len())
    }

    #[inline]
    pub fn treatment(&self, unit: usize, period: usize) -> Option<bool> {
        self.treatment[self.cell(unit, period)]
    }

    #[inline]
    pub fn outcome(&self, unit: usize, period: usize) -> Option<f64> {
        self.outcome[self.cell(unit, period)]
    }

    pub fn covariate_names(&self) -> impl Iterator<Item = &str> {
        self.covariates.keys().map(String::as_str)
    }

    pub fn categorical_names(&self) -> impl Iterator<Item = &str> {
        self.categorical.keys().map(String::as_str)
    }

    /// Numeric view of a covariate, the outcome, or the treatment (as 0/1).
    pub fn series(&self, name: &str) -> Result<Series<'_>> {
        let values: Cow<'_, [Option<f64>]> = if let Some(c) = self.covariates.get(name) {
            Cow::Borrowed(c)
        } else if name == self.columns.outcome {
            Cow::Borrowed(&self.outcome)
        } else if name == self.columns.treatment {
            Cow::Owned(
                self.treatment
                    .iter()
                    .map(|x| x.map(|b| if b { 1.0 } else { 0.0 }))
                    .collect(),
            )
        } else {
            return Err(Error::UnknownVariable(name.to_string()));
        };
        Ok(Series {
            values,
            n_periods: self.n_periods(),
        })
    }

    /// Value of `variable` for `unit` at `period - lag`.
    pub fn lagged_value(
        &self,
        variable: &str,
        unit: usize,
        period: usize,
        lag: usize,
    ) -> Result<Option<f64>> {
        Ok(self.series(variable)?.lagged(unit, period, lag))
    }

    /// Level of a categorical variable at a cell. Numeric covariates are
    /// accepted too; their values are formatted as levels.
    pub fn level(&self, name: &str, unit: usize, period: usize) -> Result<Option<String>> {
        let cell = self.cell(unit, period);
        if let Some(c) = self.categorical.get(name) {
            return Ok(c[cell].clone());
        }
        if let Some(c) = self.covariates.get(name) {
            return Ok(c[cell].map(|v| v.to_string()));
        }
        Err(Error::UnknownVariable(name.to_string()))
    }

    pub fn summarize(&self) -> PanelSummary {
        let missing = self.treatment.iter().filter(|x| x.is_none()).count();
        PanelSummary {
            unit_id_name: self.columns.unit.clone(),
            time_id_name: self.columns.time.clone(),
            treatment_name: self.columns.treatment.clone(),
            outcome_name: self.columns.outcome.clone(),
            n_units: self.n_units(),
            n_periods: self.n_periods(),
            treatment_missing_fraction: missing as f64 / self.n_cells() as f64,
        }
    }

    /// Treatment distribution with each unit ranked by its total treatment
    /// (ascending, ties in unit order). Missing cells stay missing.
    pub fn treatment_grid(&self) -> Vec<TreatmentGridRow> {
        let totals: Vec<usize> = (0..self.n_units())
            .map(|u| {
                (0..self.n_periods())
                    .filter(|&t| self.treatment(u, t) == Some(true))
                    .count()
            })
            .collect();
        let mut order: Vec<usize> = (0..self.n_units()).collect();
        order.sort_by_key(|&u| (totals[u], u));
        let mut rank = vec![0; self.n_units()];
        for (r, &u) in order.iter().enumerate() {
            rank[u] = r + 1;
        }
        let mut rows = Vec::with_capacity(self.n_cells());
        for u in 0..self.n_units() {
            for t in 0..self.n_periods() {
                rows.push(TreatmentGridRow {
                    unit: self.units[u].clone(),
                    time: self.times[t],
                    treatment: self.treatment(u, t),
                    rank: rank[u],
                });
            }
        }
        rows
    }
}

pub fn write_treatment_grid_csv<W: Write>(rows: &[TreatmentGridRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit", "time", "treatment", "rank"])?;
    for r in rows {
        let treat = match r.treatment {
            Some(true) => "1",
            Some(false) => "0",
            None => "NA",
        };
        w.write_record([
            r.unit.to_string(),
            r.time.to_string(),
            treat.to_string(),
            r.rank.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols() -> ColumnNames {
        ColumnNames::new("id", "year", "d", "y")
    }

    fn load(csv: &str) -> Result<PanelData> {
        PanelData::from_csv_reader(csv.as_bytes(), &cols())
    }

    #[test]
    fn fills_missing_periods() {
        let p = load("id,year,d,y\n7,1,0,1.5\n7,3,1,2.5\n").unwrap();
        assert_eq!(p.times(), &[1, 2, 3]);
        assert_eq!(p.n_cells(), 3);
        assert_eq!(p.treatment(0, 1), None);
        assert_eq!(p.outcome(0, 1), None);
        assert_eq!(p.treatment(0, 2), Some(true));
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let err = load("id,year,d,y\n1,1,0,1\n1,2,2,1\n").unwrap_err();
        match err {
            Error::InvalidTreatment { line, value } => {
                assert_eq!(line, 3);
                assert_eq!(value, "2");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_bad_times() {
        let err = load("id,year,d,y\n1,1,0,1\n1,1,1,1\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateRow { time: 1, .. }), "{err}");
        let err = load("id,year,d,y\n1,x,0,1\n").unwrap_err();
        assert!(matches!(err, Error::InvalidTime { .. }));
        let err = load("id,year,y\n1,1,1\n").unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "d"));
    }

    #[test]
    fn na_and_empty_are_missing() {
        let p = load("id,year,d,y,x\n1,1,NA,,NA\n1,2,1,NA,3\n").unwrap();
        assert_eq!(p.treatment(0, 0), None);
        assert_eq!(p.outcome(0, 0), None);
        assert_eq!(p.lagged_value("x", 0, 1, 0).unwrap(), Some(3.0));
        assert_eq!(p.lagged_value("x", 0, 1, 1).unwrap(), None);
    }

    #[test]
    fn extra_columns_split_numeric_and_categorical() {
        let p = load("id,year,d,y,x,region\n1,1,0,1,2.5,north\n2,1,1,1,NA,south\n").unwrap();
        assert_eq!(p.covariate_names().collect::<Vec<_>>(), vec!["x"]);
        assert_eq!(p.categorical_names().collect::<Vec<_>>(), vec!["region"]);
        assert_eq!(p.level("region", 1, 0).unwrap().as_deref(), Some("south"));
        assert!(p.series("region").is_err());
    }

    #[test]
    fn string_units_sort_lexicographically() {
        let p = load("id,year,d,y\nb,1,0,1\na,1,0,1\n").unwrap();
        assert_eq!(p.units(), &[UnitId::Name("a".into()), UnitId::Name("b".into())]);
    }

    #[test]
    fn lags_and_unknown_variables() {
        let p = load("id,year,d,y\n1,1,0,1\n1,2,0,2\n1,3,1,3\n").unwrap();
        assert_eq!(p.lagged_value("y", 0, 2, 0).unwrap(), Some(3.0));
        assert_eq!(p.lagged_value("y", 0, 2, 2).unwrap(), Some(1.0));
        assert_eq!(p.lagged_value("y", 0, 2, 3).unwrap(), None);
        assert_eq!(p.lagged_value("d", 0, 2, 0).unwrap(), Some(1.0));
        assert!(matches!(
            p.lagged_value("nope", 0, 0, 0),
            Err(Error::UnknownVariable(_))
        ));
    }

    #[test]
    fn summary_counts_missing_treatment() {
        let mut csv = String::from("id,year,d,y\n");
        for u in 0..5 {
            for t in 0..2 {
                let d = if u == 0 && t == 0 { "NA" } else { "0" };
                csv.push_str(&format!("{u},{t},{d},1\n"));
            }
        }
        let s = load(&csv).unwrap().summarize();
        assert_eq!((s.n_units, s.n_periods), (5, 2));
        assert!((s.treatment_missing_fraction - 0.1).abs() < 1e-15);

        let s = load("id,year,d,y\n1,1,0,1\n1,2,0,1\n2,1,1,1\n2,2,0,1\n3,1,0,1\n3,2,0,1\n")
            .unwrap()
            .summarize();
        assert_eq!(s.treatment_missing_fraction, 0.0);
    }

    #[test]
    fn treatment_grid_ranks_by_total_treatment() {
        let p = load("id,year,d,y\n1,1,1,0\n1,2,1,0\n2,1,0,0\n2,2,0,0\n3,1,NA,0\n3,2,1,0\n")
            .unwrap();
        let grid = p.treatment_grid();
        assert_eq!(grid.len(), 6);
        let rank_of = |u: i64| grid.iter().find(|r| r.unit == UnitId::Int(u)).unwrap().rank;
        assert_eq!(rank_of(2), 1);
        assert_eq!(rank_of(3), 2);
        assert_eq!(rank_of(1), 3);
        assert_eq!(grid[4].treatment, None);

        let p = load("id,year,d,y\n5,1,0,0\n3,1,0,0\n4,1,0,0\n").unwrap();
        let ranks: Vec<_> = p.treatment_grid().iter().map(|r| r.rank).collect();
        assert_eq!(ranks, vec![1, 2, 3]);
    }
}
