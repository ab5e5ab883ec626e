//! Literal re-evaluations of the matching, estimation and balance formulas.
//!
//! Everything here is written as plainly as possible and shares no
//! arithmetic with `panelmatch`; only the panel's cell accessors and the
//! matched-set containers are reused.

use panelmatch::{MatchSpec, MatchedSet, MatchedSets, PanelData, Qoi, SetKind};
use thiserror::Error;

/// Largest panel dimension the brute-force matcher accepts.
pub const MAX_ORACLE_DIM: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("oracle accepts at most {max}x{max} panels, got {units}x{periods}")]
    TooLarge { units: usize, periods: usize, max: usize },
}

fn kinds(qoi: Qoi) -> Vec<SetKind> {
    match qoi {
        Qoi::Att => vec![SetKind::Att],
        Qoi::Art => vec![SetKind::Art],
        Qoi::Atc => vec![SetKind::Atc],
        Qoi::Ate => vec![SetKind::Att, SetKind::Atc],
    }
}

/// Status a treated observation has at (t - 1, t) and a control has at t.
fn statuses(kind: SetKind) -> (bool, bool, bool) {
    match kind {
        SetKind::Att => (false, true, false),
        SetKind::Art => (true, false, true),
        SetKind::Atc => (false, false, true),
    }
}

/// Exhaustive search over every (treated unit, period, candidate control).
pub fn brute_force_matched_sets(
    panel: &PanelData,
    spec: &MatchSpec,
) -> Result<Vec<MatchedSets>, OracleError> {
    let (n, big_t) = (panel.n_units(), panel.n_periods());
    if n > MAX_ORACLE_DIM || big_t > MAX_ORACLE_DIM {
        return Err(OracleError::TooLarge {
            units: n,
            periods: big_t,
            max: MAX_ORACLE_DIM,
        });
    }
    let lag = spec.lag;
    let max_lead = spec.leads.iter().copied().max().unwrap_or(0);
    let mut out = Vec::new();
    for kind in kinds(spec.qoi) {
        let (before, now, control_now) = statuses(kind);
        let mut sets = Vec::new();
        for i in 0..n {
            for t in 0..big_t {
                if t < lag {
                    continue;
                }
                if panel.treatment(i, t) != Some(now) || panel.treatment(i, t - 1) != Some(before) {
                    continue;
                }
                let mut ok = true;
                if !spec.match_missing {
                    for l in 1..=lag {
                        if panel.treatment(i, t - l).is_none() {
                            ok = false;
                        }
                    }
                }
                if spec.forbid_treatment_reversal {
                    for s in t..=t + max_lead {
                        if s >= big_t || panel.treatment(i, s) != Some(now) {
                            ok = false;
                        }
                    }
                }
                if spec.placebo_test {
                    for l in 1..=lag {
                        if panel.outcome(i, t - l).is_none() {
                            ok = false;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                let mut controls = Vec::new();
                for c in 0..n {
                    if c == i || panel.treatment(c, t) != Some(control_now) {
                        continue;
                    }
                    let mut same = true;
                    for l in 1..=lag {
                        let a = panel.treatment(i, t - l);
                        let b = panel.treatment(c, t - l);
                        if a != b || (!spec.match_missing && b.is_none()) {
                            same = false;
                        }
                    }
                    if same {
                        controls.push(c);
                    }
                }
                let k = controls.len();
                sets.push(MatchedSet {
                    treated_unit: i,
                    treated_time: t,
                    weights: vec![1.0 / k as f64; k],
                    controls,
                    distances: None,
                    refinable: true,
                });
            }
        }
        out.push(MatchedSets {
            kind,
            spec: spec.clone(),
            refinement: None,
            sets,
        });
    }
    Ok(out)
}

/// Per-set effects at `lead` by direct summation, `None` for sets that do
/// not contribute. Controls lacking an outcome are dropped and the other
/// weights rescaled.
pub fn brute_force_set_effects(panel: &PanelData, sets: &MatchedSets, lead: usize) -> Vec<Option<f64>> {
    let sign = if sets.kind == SetKind::Atc { -1.0 } else { 1.0 };
    let mut out = Vec::new();
    for s in &sets.sets {
        out.push(set_effect(panel, s, lead as isize, sign));
    }
    out
}

fn set_effect(panel: &PanelData, s: &MatchedSet, offset: isize, sign: f64) -> Option<f64> {
    if !s.refinable || s.controls.is_empty() {
        return None;
    }
    let t = s.treated_time as isize;
    let post = t + offset;
    let base = t - 1;
    if post < 0 || post >= panel.n_periods() as isize || base < 0 {
        return None;
    }
    let (post, base) = (post as usize, base as usize);
    let change = |u: usize| -> Option<f64> { Some(panel.outcome(u, post)? - panel.outcome(u, base)?) };
    let treated = change(s.treated_unit)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (idx, &c) in s.controls.iter().enumerate() {
        let w = s.weights[idx];
        if w > 0.0 {
            if let Some(d) = change(c) {
                num += w * d;
                den += w;
            }
        }
    }
    if den == 0.0 {
        return None;
    }
    Some(sign * (treated - num / den))
}

/// Estimate at `lead`: the plain average of contributing set effects.
pub fn brute_force_estimate(panel: &PanelData, sets: &MatchedSets, lead: usize) -> Option<f64> {
    brute_force_offset_estimate(panel, sets, lead as isize)
}

/// As [`brute_force_estimate`] with an arbitrary outcome offset (negative
/// for placebo periods).
pub fn brute_force_offset_estimate(panel: &PanelData, sets: &MatchedSets, offset: isize) -> Option<f64> {
    let sign = if sets.kind == SetKind::Atc { -1.0 } else { 1.0 };
    let mut total = 0.0;
    let mut count = 0;
    for s in &sets.sets {
        if let Some(e) = set_effect(panel, s, offset, sign) {
            total += e;
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

fn usable(s: &MatchedSet) -> bool {
    s.refinable && !s.controls.is_empty() && s.weights.iter().any(|&w| w > 0.0)
}

fn numeric(panel: &PanelData, name: &str, u: usize, t: usize) -> Option<f64> {
    if name == panel.columns().outcome {
        panel.outcome(u, t)
    } else {
        panel.lagged_value(name, u, t, 0).ok().flatten()
    }
}

/// Balance table `[row for lag L..=0][covariate]`, re-evaluated from the
/// raw grids. With `uniform`, control weights are equal.
pub fn brute_force_balance(
    panel: &PanelData,
    sets: &MatchedSets,
    covariates: &[&str],
    uniform: bool,
) -> Vec<Vec<Option<f64>>> {
    let lag = sets.spec.lag;
    let mut table = Vec::new();
    for l in (0..=lag).rev() {
        let mut row = Vec::new();
        for name in covariates {
            // Cross-sectional mean at a period over observed units.
            let period_mean = |p: usize| -> Option<f64> {
                let mut s = 0.0;
                let mut k = 0;
                for u in 0..panel.n_units() {
                    if let Some(v) = numeric(panel, name, u, p) {
                        s += v;
                        k += 1;
                    }
                }
                (k > 0).then(|| s / k as f64)
            };
            let mut ss = 0.0;
            let mut n1 = 0;
            for s in sets.sets.iter().filter(|s| usable(s)) {
                let p = s.treated_time - l;
                if let (Some(v), Some(m)) = (numeric(panel, name, s.treated_unit, p), period_mean(p)) {
                    ss += (v - m) * (v - m);
                    n1 += 1;
                }
            }
            if n1 < 2 || ss == 0.0 {
                row.push(None);
                continue;
            }
            let sd = (ss / (n1 - 1) as f64).sqrt();
            let mut total = 0.0;
            let mut count = 0;
            for s in sets.sets.iter().filter(|s| usable(s)) {
                let p = s.treated_time - l;
                let Some(v) = numeric(panel, name, s.treated_unit, p) else {
                    continue;
                };
                let mut num = 0.0;
                let mut den = 0.0;
                for (idx, &c) in s.controls.iter().enumerate() {
                    let w = if uniform { 1.0 } else { s.weights[idx] };
                    if w > 0.0 {
                        if let Some(x) = numeric(panel, name, c, p) {
                            num += w * x;
                            den += w;
                        }
                    }
                }
                if den > 0.0 {
                    total += (v - num / den) / sd;
                    count += 1;
                }
            }
            row.push((count > 0).then(|| total / count as f64));
        }
        table.push(row);
    }
    table
}

/// Inverse by Gauss-Jordan elimination with partial pivoting; `None` if a
/// pivot vanishes.
pub fn gauss_jordan_inverse(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in 0..2 * n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    Some(a.into_iter().map(|r| r[n..].to_vec()).collect())
}

/// Covariate term for [`oracle_mahalanobis`]: variable, first lag, last
/// lag, power.
pub type OracleTerm<'a> = (&'a str, usize, usize, u32);

fn oracle_expand(panel: &PanelData, terms: &[OracleTerm<'_>], u: usize, p: usize) -> Option<Vec<f64>> {
    let mut v = Vec::new();
    for &(name, from, to, power) in terms {
        for lag in from..=to {
            if lag > p {
                return None;
            }
            v.push(numeric(panel, name, u, p - lag)?.powi(power as i32));
        }
    }
    Some(v)
}

/// Lag-averaged Mahalanobis distances of a set's controls, with each
/// period's covariance inverted by elimination. `None` when the treated
/// observation lacks covariates or a covariance is singular.
pub fn oracle_mahalanobis(
    panel: &PanelData,
    set: &MatchedSet,
    terms: &[OracleTerm<'_>],
    lag: usize,
    diagonal: bool,
) -> Option<Vec<Option<f64>>> {
    let t = set.treated_time;
    let mut treated = Vec::new();
    for l in 1..=lag {
        treated.push(oracle_expand(panel, terms, set.treated_unit, t - l)?);
    }
    let rows: Vec<Option<Vec<Vec<f64>>>> = set
        .controls
        .iter()
        .map(|&c| (1..=lag).map(|l| oracle_expand(panel, terms, c, t - l)).collect())
        .collect();
    let mut dist: Vec<Option<f64>> = rows.iter().map(|r| r.as_ref().map(|_| 0.0)).collect();
    for k in 0..lag {
        let mut pts = vec![treated[k].clone()];
        for r in rows.iter().flatten() {
            pts.push(r[k].clone());
        }
        let n = pts.len() as f64;
        let p = treated[k].len();
        let mean: Vec<f64> = (0..p).map(|j| pts.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let mut cov = vec![vec![0.0; p]; p];
        for a in 0..p {
            for b in 0..p {
                if diagonal && a != b {
                    continue;
                }
                let s: f64 = pts.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum();
                cov[a][b] = s / (n - 1.0);
            }
        }
        let inv = gauss_jordan_inverse(&cov)?;
        for (d, r) in dist.iter_mut().zip(&rows) {
            if let (Some(acc), Some(r)) = (d.as_mut(), r) {
                let diff: Vec<f64> = (0..p).map(|j| treated[k][j] - r[k][j]).collect();
                let mut q = 0.0;
                for a in 0..p {
                    for b in 0..p {
                        q += diff[a] * inv[a][b] * diff[b];
                    }
                }
                *acc += q.sqrt();
            }
        }
    }
    for d in dist.iter_mut().flatten() {
        *d /= lag as f64;
    }
    Some(dist)
}

/// Maximizes a two-group logistic likelihood over an exhaustive lattice.
///
/// Group 0 has covariate 0 and group 1 covariate 1; each is given as
/// `(observations, successes)`. The lattice covers intercept and slope in
/// `[-10, 10]` with step `1e-3`. Returns `(intercept, slope)`.
pub fn logistic_grid_search(group0: (f64, f64), group1: (f64, f64)) -> (f64, f64) {
    const STEPS: usize = 20_000;
    const H: f64 = 1e-3;
    let ll = |eta: f64, (n, s): (f64, f64)| s * eta - n * (1.0 + eta.exp()).ln();
    // The likelihood separates as f0(b0) + f1(b0 + b1); tabulate both.
    let f0: Vec<f64> = (0..=STEPS).map(|i| ll(-10.0 + i as f64 * H, group0)).collect();
    let f1: Vec<f64> = (0..=2 * STEPS).map(|k| ll(-20.0 + k as f64 * H, group1)).collect();
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for i in 0..=STEPS {
        let a = f0[i];
        for j in 0..=STEPS {
            let v = a + f1[i + j];
            if v > best.0 {
                best = (v, i, j);
            }
        }
    }
    (-10.0 + best.1 as f64 * H, -10.0 + best.2 as f64 * H)
}
