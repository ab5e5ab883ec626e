//! Lag-averaged standardized Mahalanobis distances within a matched set.

use nalgebra::{DMatrix, DVector};

use super::covariates::{CovariateExpander, CovariateSpec};
use crate::error::Result;
use crate::matching::MatchedSet;
use crate::panel::PanelData;

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_RELATIVE_TOLERANCE: f64 = 1e-10;

/// Sample covariance (denominator `n - 1`) of the rows in `points`.
pub fn sample_covariance(points: &[Vec<f64>]) -> DMatrix<f64> {
    let n = points.len();
    let p = points.first().map_or(0, Vec::len);
    let mut mean = DVector::zeros(p);
    for x in points {
        mean += DVector::from_column_slice(x);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(p, p);
    for x in points {
        let d = DVector::from_column_slice(x) - &mean;
        cov += &d * d.transpose();
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    cov
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff. With
/// `diagonal_only`, off-diagonal entries are ignored.
pub fn pseudo_inverse(cov: &DMatrix<f64>, diagonal_only: bool) -> DMatrix<f64> {
    let p = cov.nrows();
    if diagonal_only {
        let max = (0..p).map(|i| cov[(i, i)]).fold(0.0_f64, f64::max);
        let mut inv = DMatrix::zeros(p, p);
        for i in 0..p {
            let d = cov[(i, i)];
            if d > PINV_RELATIVE_TOLERANCE * max && d > 0.0 {
                inv[(i, i)] = 1.0 / d;
            }
        }
        return inv;
    }
    let svd = cov.clone().svd(true, true);
    let max = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return DMatrix::zeros(p, p);
    }
    svd.pseudo_inverse(PINV_RELATIVE_TOLERANCE * max)
        .unwrap_or_else(|_| DMatrix::zeros(p, p))
}

fn quadratic_form(diff: &DVector<f64>, inv: &DMatrix<f64>) -> f64 {
    (diff.transpose() * inv * diff)[(0, 0)].max(0.0)
}

/// Distances of a set's controls to its treated observation.
#[derive(Debug, Clone, PartialEq)]
pub enum SetDistances {
    /// The treated observation lacks covariates at some pre-period.
    TreatedMissing,
    /// One entry per control; `None` for controls lacking covariates.
    Computed(Vec<Option<f64>>),
}

pub(crate) fn distances_with(
    expander: &CovariateExpander<'_>,
    set: &MatchedSet,
    lag: usize,
    use_diagonal: bool,
) -> SetDistances {
    let (i, t) = (set.treated_unit, set.treated_time);
    let mut treated_rows = Vec::with_capacity(lag);
    for l in 1..=lag {
        match expander.expand(i, t - l) {
            Some(v) => treated_rows.push(v),
            None => return SetDistances::TreatedMissing,
        }
    }
    // Per control: covariate vector at each pre-period, if complete.
    let control_rows: Vec<Option<Vec<Vec<f64>>>> = set
        .controls
        .iter()
        .map(|&c| (1..=lag).map(|l| expander.expand(c, t - l)).collect())
        .collect();
    let mut totals: Vec<Option<f64>> = control_rows
        .iter()
        .map(|r| r.as_ref().map(|_| 0.0))
        .collect();
    if totals.iter().all(Option::is_none) {
        return SetDistances::Computed(totals);
    }

    for (k, treated) in treated_rows.iter().enumerate() {
        let mut points = vec![treated.clone()];
        points.extend(control_rows.iter().flatten().map(|rows| rows[k].clone()));
        let inv = pseudo_inverse(&sample_covariance(&points), use_diagonal);
        let tv = DVector::from_column_slice(treated);
        for (total, rows) in totals.iter_mut().zip(&control_rows) {
            if let (Some(acc), Some(rows)) = (total.as_mut(), rows) {
                let diff = &tv - DVector::from_column_slice(&rows[k]);
                *acc += quadratic_form(&diff, &inv).sqrt();
            }
        }
    }
    for d in totals.iter_mut().flatten() {
        *d /= lag as f64;
    }
    SetDistances::Computed(totals)
}

/// Mahalanobis distances between the treated observation of `set` and each
/// of its controls, averaged over the `lag` pre-treatment periods. The
/// covariance at each period is the sample covariance of the treated and
/// control vectors of this set.
pub fn mahalanobis_distances(
    panel: &PanelData,
    set: &MatchedSet,
    spec: &CovariateSpec,
    lag: usize,
    use_diagonal: bool,
) -> Result<SetDistances> {
    let expander = CovariateExpander::new(panel, spec)?;
    Ok(distances_with(&expander, set, lag, use_diagonal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{ColumnNames, UnitId};
    use crate::refinement::covariates::CovariateTerm;
    use indexmap::IndexMap;

    fn panel_with(x: Vec<f64>, n_units: usize, n_periods: usize) -> PanelData {
        let n = n_units * n_periods;
        let mut covs = IndexMap::new();
        covs.insert("x".to_string(), x.into_iter().map(Some).collect());
        PanelData::from_grids(
            ColumnNames::new("i", "t", "d", "y"),
            (0..n_units as i64).map(UnitId::Int).collect(),
            (0..n_periods as i64).collect(),
            vec![Some(false); n],
            vec![Some(0.0); n],
            covs,
        )
        .unwrap()
    }

    fn set(controls: Vec<usize>) -> MatchedSet {
        let n = controls.len();
        MatchedSet {
            treated_unit: 0,
            treated_time: 1,
            controls,
            weights: vec![1.0 / n as f64; n],
            distances: None,
            refinable: true,
        }
    }

    #[test]
    fn identical_covariates_give_zero() {
        // unit 0 and 1 share x at period 0; unit 2 differs
        let p = panel_with(vec![1.0, 0.0, 1.0, 0.0, 3.0, 0.0], 3, 2);
        let spec = CovariateSpec::new(vec![CovariateTerm::new("x", 0, 0, 1)]);
        let d = mahalanobis_distances(&p, &set(vec![1, 2]), &spec, 1, true).unwrap();
        let SetDistances::Computed(d) = d else { panic!() };
        assert_eq!(d[0], Some(0.0));
        assert!(d[1].unwrap() > 0.0);
    }

    #[test]
    fn scalar_case_is_abs_difference_over_sd() {
        // values at period 0: treated 1, controls 2 and 6
        let p = panel_with(vec![1.0, 0.0, 2.0, 0.0, 6.0, 0.0], 3, 2);
        let spec = CovariateSpec::new(vec![CovariateTerm::new("x", 0, 0, 1)]);
        let SetDistances::Computed(d) =
            mahalanobis_distances(&p, &set(vec![1, 2]), &spec, 1, true).unwrap()
        else {
            panic!()
        };
        // mean 3, sample variance ((4 + 1 + 9) / 2) = 7
        let v: f64 = 7.0;
        assert!((d[0].unwrap() - 1.0 / v.sqrt()).abs() < 1e-12);
        assert!((d[1].unwrap() - 5.0 / v.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn missing_treated_and_controls() {
        let mut p = panel_with(vec![1.0, 0.0, 2.0, 0.0, 6.0, 0.0], 3, 2);
        let spec = CovariateSpec::new(vec![CovariateTerm::new("x", 1, 1, 1)]);
        assert_eq!(
            mahalanobis_distances(&p, &set(vec![1, 2]), &spec, 1, true).unwrap(),
            SetDistances::TreatedMissing
        );
        let mut covs = IndexMap::new();
        covs.insert(
            "x".to_string(),
            vec![Some(1.0), Some(0.0), None, Some(0.0), Some(6.0), Some(0.0)],
        );
        p = PanelData::from_grids(
            p.columns().clone(),
            p.units().to_vec(),
            p.times().to_vec(),
            vec![Some(false); 6],
            vec![Some(0.0); 6],
            covs,
        )
        .unwrap();
        let spec = CovariateSpec::new(vec![CovariateTerm::new("x", 0, 0, 1)]);
        let SetDistances::Computed(d) =
            mahalanobis_distances(&p, &set(vec![1, 2]), &spec, 1, false).unwrap()
        else {
            panic!()
        };
        assert_eq!(d[0], None);
        assert!(d[1].is_some());
    }

    #[test]
    fn singular_covariance_does_not_fail() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let inv = pseudo_inverse(&cov, false);
        assert!(inv.iter().all(|v| v.is_finite()));
        assert!((inv[(0, 0)] - 0.25).abs() < 1e-12);
        let inv = pseudo_inverse(&DMatrix::zeros(2, 2), true);
        assert!(inv.iter().all(|&v| v == 0.0));
    }
}
