//! Covariate specifications with lag ranges and powers, and their expansion
//! into per-observation vectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::panel::{PanelData, Series};

/// Inclusive lag range `from..=to`, written `"from:to"` (or a single `"k"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LagRange {
    pub from: usize,
    pub to: usize,
}

impl LagRange {
    pub fn new(from: usize, to: usize) -> Result<Self> {
        if from > to {
            return Err(Error::InvalidSpec(format!(
                "lag range {from}:{to} is decreasing"
            )));
        }
        Ok(Self { from, to })
    }

    pub fn len(&self) -> usize {
        self.to - self.from + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for LagRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.from, self.to)
    }
}

impl FromStr for LagRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("invalid lag range `{s}`"));
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        match s.split_once(':') {
            Some((a, b)) => LagRange::new(parse(a)?, parse(b)?),
            None => {
                let k = parse(s)?;
                LagRange::new(k, k)
            }
        }
    }
}

impl Serialize for LagRange {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LagRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One covariate term: `variable` at lags `lags`, raised to `power`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateTerm {
    pub name: String,
    #[serde(default)]
    pub lags: LagRange,
    #[serde(default = "default_power")]
    pub power: u8,
}

fn default_power() -> u8 {
    1
}

impl CovariateTerm {
    pub fn new(name: &str, from: usize, to: usize, power: u8) -> Self {
        Self {
            name: name.to_string(),
            lags: LagRange { from, to },
            power,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovariateSpec {
    pub terms: Vec<CovariateTerm>,
}

impl CovariateSpec {
    pub fn new(terms: Vec<CovariateTerm>) -> Self {
        Self { terms }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Length of the expanded vector.
    pub fn width(&self) -> usize {
        self.terms.iter().map(|t| t.lags.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.terms {
            if t.lags.from > t.lags.to {
                return Err(Error::InvalidSpec(format!(
                    "covariate `{}` has decreasing lag range {}",
                    t.name, t.lags
                )));
            }
            if !(1..=2).contains(&t.power) {
                return Err(Error::InvalidSpec(format!(
                    "covariate `{}` has power {}; only 1 and 2 are supported",
                    t.name, t.power
                )));
            }
        }
        Ok(())
    }
}

/// A covariate specification bound to a panel.
pub struct CovariateExpander<'a> {
    terms: Vec<(Series<'a>, &'a CovariateTerm)>,
    width: usize,
}

impl<'a> CovariateExpander<'a> {
    pub fn new(panel: &'a PanelData, spec: &'a CovariateSpec) -> Result<Self> {
        spec.validate()?;
        let terms = spec
            .terms
            .iter()
            .map(|t| Ok((panel.series(&t.name)?, t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            terms,
            width: spec.width(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Expanded vector for `unit` at `period`, or `None` if any component is
    /// missing or reaches before the first period.
    pub fn expand(&self, unit: usize, period: usize) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width);
        for (series, term) in &self.terms {
            for lag in term.lags.from..=term.lags.to {
                let v = series.lagged(unit, period, lag)?;
                out.push(if term.power == 2 { v * v } else { v });
            }
        }
        Some(out)
    }
}

/// Expanded covariate vector of `unit` at period index `period`.
pub fn expand_covariates(
    panel: &PanelData,
    spec: &CovariateSpec,
    period: usize,
    unit: usize,
) -> Result<Option<Vec<f64>>> {
    Ok(CovariateExpander::new(panel, spec)?.expand(unit, period))
}
