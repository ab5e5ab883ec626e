//! Propensity-score models: logistic regression by IRLS and the
//! just-identified covariate-balancing propensity score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to propensity scores before logits and odds.
pub const SCORE_CLAMP: f64 = 1e-9;

const LOGISTIC_MAX_ITER: usize = 100;
const LOGISTIC_SCORE_TOL: f64 = 1e-8;
const CBPS_MAX_ITER: usize = 200;
const CBPS_MOMENT_TOL: f64 = 1e-6;
const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    LogisticMle,
    Cbps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Intercept first, then one coefficient per covariate column. Dropped
    /// (linearly dependent) columns carry a zero coefficient.
    pub coefficients: Vec<f64>,
    pub fit_method: FitMethod,
    pub converged: bool,
    pub n_obs: usize,
    pub iterations: usize,
    /// Indices (into the covariate columns) removed for rank deficiency.
    pub dropped_columns: Vec<usize>,
    pub separated: bool,
    /// Log-likelihood after each accepted IRLS step, starting value first.
    pub log_likelihood_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

#[inline]
fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
#[inline]
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

pub fn clamp_score(p: f64) -> f64 {
    p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

pub fn logit(p: f64) -> f64 {
    let p = clamp_score(p);
    (p / (1.0 - p)).ln()
}

impl PropensityModel {
    fn linear_predictor(&self, covariates: &[f64]) -> f64 {
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(covariates)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }

    /// Clamped propensity score for one covariate row (no intercept column).
    pub fn predict(&self, covariates: &[f64]) -> f64 {
        clamp_score(sigmoid(self.linear_predictor(covariates)))
    }
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut z = DMatrix::from_element(n, x.ncols() + 1, 1.0);
    z.view_mut((0, 1), (n, x.ncols())).copy_from(x);
    z
}

/// Log-likelihood of a logistic model with coefficients `beta` (intercept
/// first) on covariates `x` (no intercept column).
pub fn log_likelihood(beta: &[f64], x: &DMatrix<f64>, labels: &[bool]) -> f64 {
    let z = with_intercept(x);
    let eta = &z * DVector::from_column_slice(beta);
    ll_from_eta(&eta, labels)
}

fn ll_from_eta(eta: &DVector<f64>, labels: &[bool]) -> f64 {
    eta.iter()
        .zip(labels)
        .map(|(&e, &y)| if y { e - softplus(e) } else { -softplus(e) })
        .sum()
}

/// Gradient of the log-likelihood, `Zᵀ(y − p)`.
pub fn score(beta: &[f64], x: &DMatrix<f64>, labels: &[bool]) -> Vec<f64> {
    let z = with_intercept(x);
    let eta = &z * DVector::from_column_slice(beta);
    let resid = DVector::from_iterator(
        labels.len(),
        eta.iter()
            .zip(labels)
            .map(|(&e, &y)| f64::from(u8::from(y)) - sigmoid(e)),
    );
    (z.transpose() * resid).iter().copied().collect()
}

/// Balance moments `Σ zᵢ (Tᵢ − πᵢ) / (πᵢ(1 − πᵢ))`, intercept first.
pub fn cbps_moments(beta: &[f64], x: &DMatrix<f64>, labels: &[bool]) -> Vec<f64> {
    let z = with_intercept(x);
    let eta = &z * DVector::from_column_slice(beta);
    let h = DVector::from_iterator(
        labels.len(),
        eta.iter().zip(labels).map(|(&e, &y)| balance_term(e, y)),
    );
    (z.transpose() * h).iter().copied().collect()
}

#[inline]
fn balance_term(eta: f64, treated: bool) -> f64 {
    let p = clamp_score(sigmoid(eta));
    if treated {
        1.0 / p
    } else {
        -1.0 / (1.0 - p)
    }
}

/// Columns of `z` (intercept included at 0) that are linearly independent of
/// the columns before them, by modified Gram-Schmidt.
fn independent_columns(z: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..z.ncols() {
        let col = z.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = col / norm;
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let r = v.norm();
        if r > RANK_TOL {
            basis.push(v / r);
            keep.push(j);
        }
    }
    keep
}

fn solve_spd(h: DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(g));
    }
    h.lu().solve(g)
}

fn check_inputs(x: &DMatrix<f64>, labels: &[bool]) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::InvalidSpec(format!(
            "design has {} rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if !labels.iter().any(|&y| y) || labels.iter().all(|&y| y) {
        return Err(Error::InvalidSpec(
            "propensity model needs at least one observation of each label".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSpec("design matrix has non-finite entries".into()));
    }
    Ok(())
}

fn expand_coefficients(reduced: &DVector<f64>, keep: &[usize], total: usize) -> Vec<f64> {
    let mut beta = vec![0.0; total];
    for (k, &j) in keep.iter().enumerate() {
        beta[j] = reduced[k];
    }
    beta
}

struct Reduced {
    z: DMatrix<f64>,
    keep: Vec<usize>,
    dropped: Vec<usize>,
    total: usize,
}

fn reduce(x: &DMatrix<f64>) -> Reduced {
    let full = with_intercept(x);
    let keep = independent_columns(&full);
    let dropped = (1..full.ncols())
        .filter(|j| !keep.contains(j))
        .map(|j| j - 1)
        .collect();
    Reduced {
        z: full.select_columns(&keep),
        keep,
        dropped,
        total: full.ncols(),
    }
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares with step halving, so the log-likelihood never decreases.
///
/// `x` holds covariates only; an intercept is added. Linearly dependent
/// columns are dropped and reported. Complete separation is flagged as
/// non-converged.
pub fn fit_logistic(x: &DMatrix<f64>, labels: &[bool]) -> Result<PropensityModel> {
    check_inputs(x, labels)?;
    let Reduced {
        z,
        keep,
        dropped,
        total,
    } = reduce(x);
    let n = z.nrows();
    let y = DVector::from_iterator(n, labels.iter().map(|&b| f64::from(u8::from(b))));

    let mut beta = DVector::zeros(z.ncols());
    let mut eta = &z * &beta;
    let mut ll = ll_from_eta(&eta, labels);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut warnings = Vec::new();

    while iterations < LOGISTIC_MAX_ITER {
        let p = eta.map(sigmoid);
        let grad = z.transpose() * (&y - &p);
        if grad.amax() < LOGISTIC_SCORE_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let w = p.map(|pi| (pi * (1.0 - pi)).max(1e-300));
        let mut zw = z.clone();
        for (mut row, &wi) in zw.row_iter_mut().zip(w.iter()) {
            row *= wi;
        }
        let info = z.transpose() * zw;
        let Some(step) = solve_spd(info, &grad) else {
            warnings.push("information matrix is singular".to_string());
            break;
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta + &step * scale;
            let cand_eta = &z * &cand;
            let cand_ll = ll_from_eta(&cand_eta, labels);
            if cand_ll >= ll {
                let gain = cand_ll - ll;
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                trace.push(ll);
                accepted = true;
                if gain <= f64::EPSILON * ll.abs() && step.amax() * scale < 1e-12 {
                    // No further progress is representable.
                    let p = eta.map(sigmoid);
                    let g = z.transpose() * (&y - &p);
                    converged = g.amax() < LOGISTIC_SCORE_TOL * 100.0;
                    iterations = LOGISTIC_MAX_ITER;
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let p = eta.map(sigmoid);
    let separated = p
        .iter()
        .zip(labels)
        .all(|(&pi, &yi)| (f64::from(u8::from(yi)) - pi).abs() < 1e-6);
    if separated {
        converged = false;
        warnings.push("complete separation: scores are clamped".to_string());
    } else if !converged {
        warnings.push(format!(
            "logistic fit did not converge in {LOGISTIC_MAX_ITER} iterations"
        ));
    }

    Ok(PropensityModel {
        coefficients: expand_coefficients(&beta, &keep, total),
        fit_method: FitMethod::LogisticMle,
        converged,
        n_obs: n,
        iterations: iterations.min(LOGISTIC_MAX_ITER),
        dropped_columns: dropped,
        separated,
        log_likelihood_trace: trace,
        warnings,
    })
}

/// Just-identified covariate-balancing propensity score with a logistic
/// link, solved by damped Newton iterations from the logistic MLE. Falls
/// back to the MLE (with a warning) if the moments cannot be zeroed.
pub fn fit_cbps(x: &DMatrix<f64>, labels: &[bool]) -> Result<PropensityModel> {
    let mle = fit_logistic(x, labels)?;
    let Reduced { z, keep, total, .. } = reduce(x);
    let n = z.nrows();

    let moments = |beta: &DVector<f64>| -> DVector<f64> {
        let eta = &z * beta;
        let h = DVector::from_iterator(
            n,
            eta.iter().zip(labels).map(|(&e, &y)| balance_term(e, y)),
        );
        z.transpose() * h
    };

    let mut beta = DVector::from_iterator(keep.len(), keep.iter().map(|&j| mle.coefficients[j]));
    let mut g = moments(&beta);
    let mut converged = g.amax() < CBPS_MOMENT_TOL;
    let mut iterations = 0;
    while !converged && iterations < CBPS_MAX_ITER {
        iterations += 1;
        // Jacobian is −Σ cᵢ zᵢ zᵢᵀ with cᵢ = (1−π)/π for treated, π/(1−π) otherwise.
        let eta = &z * &beta;
        let mut zc = z.clone();
        for ((mut row, &e), &y) in zc.row_iter_mut().zip(eta.iter()).zip(labels) {
            let p = clamp_score(sigmoid(e));
            row *= if y { (1.0 - p) / p } else { p / (1.0 - p) };
        }
        let neg_jac = z.transpose() * zc;
        let Some(step) = solve_spd(neg_jac, &g) else {
            break;
        };
        let norm = g.norm();
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta + &step * scale;
            let cg = moments(&cand);
            if cg.norm() < norm {
                beta = cand;
                g = cg;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        converged = g.amax() < CBPS_MOMENT_TOL;
    }

    if converged {
        Ok(PropensityModel {
            coefficients: expand_coefficients(&beta, &keep, total),
            fit_method: FitMethod::Cbps,
            converged: true,
            n_obs: n,
            iterations,
            dropped_columns: mle.dropped_columns,
            separated: mle.separated,
            log_likelihood_trace: Vec::new(),
            warnings: mle.warnings,
        })
    } else {
        let mut warnings = mle.warnings.clone();
        warnings.push(format!(
            "CBPS moments not solved after {iterations} iterations (max |moment| {:.3e}); using logistic MLE",
            g.amax()
        ));
        Ok(PropensityModel {
            fit_method: FitMethod::Cbps,
            converged: false,
            warnings,
            ..mle
        })
    }
}
