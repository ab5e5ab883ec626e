//! Synthetic panel generators.

use indexmap::IndexMap;
use panelmatch::{ColumnNames, PanelData, UnitId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A staggered-treatment panel with additive unit and period effects.
///
/// Outcome for unit `i` at period `t`:
/// `alpha_i + gamma_t + effect[k] + pretrend + noise`, where `k` counts
/// periods since the unit's most recent onset while it is treated. The
/// pre-trend term is `-pretrend * min(s - 1 - t, pretrend_window)` before
/// the unit's first onset `s` and zero otherwise, so treated units drift
/// upward just before adoption when `pretrend > 0`.
///
/// Onsets can happen only at periods that are multiples of `onset_every`.
/// With `onset_every > max lead` and no reversals, a control at `t` stays a
/// control through `t + F`, so noiseless panels recover `effect` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_units: usize,
    pub n_periods: usize,
    /// Baseline probability of onset at an eligible period.
    pub onset_probability: f64,
    /// Per-period probability that a treated unit returns to control.
    pub reversal_probability: f64,
    pub onset_every: usize,
    /// First period at which onsets may occur.
    pub first_onset: usize,
    /// Effect by periods since onset; the last entry persists.
    pub effect: Vec<f64>,
    pub unit_effect_sd: f64,
    pub time_effect_sd: f64,
    pub noise_sd: f64,
    pub pretrend: f64,
    pub pretrend_window: usize,
    /// Log-odds shift of onset per unit of the covariate `x`.
    pub confounding: f64,
    /// Outcome coefficient on `x`.
    pub covariate_effect: f64,
    /// Number of levels of the unit-level categorical column `group`
    /// (0 for none).
    pub n_groups: usize,
    pub missing_outcome_probability: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_units: 100,
            n_periods: 20,
            onset_probability: 0.15,
            reversal_probability: 0.0,
            onset_every: 1,
            first_onset: 4,
            effect: vec![1.0],
            unit_effect_sd: 1.0,
            time_effect_sd: 1.0,
            noise_sd: 1.0,
            pretrend: 0.0,
            pretrend_window: 3,
            confounding: 0.0,
            covariate_effect: 0.0,
            n_groups: 0,
            missing_outcome_probability: 0.0,
            seed: 1,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd.max(0.0)).expect("finite standard deviation")
}

/// Generates the panel described by `spec`. Columns are `unit`, `time`,
/// `treat`, `y`, the covariate `x`, and `group` when requested.
pub fn generate_panel(spec: &SyntheticSpec) -> PanelData {
    let (n, t_len) = (spec.n_units, spec.n_periods);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alpha: Vec<f64> = (0..n).map(|_| normal(spec.unit_effect_sd).sample(&mut rng)).collect();
    let gamma: Vec<f64> = (0..t_len).map(|_| normal(spec.time_effect_sd).sample(&mut rng)).collect();
    let x_level: Vec<f64> = (0..n).map(|_| normal(1.0).sample(&mut rng)).collect();
    let base_logit = (spec.onset_probability.clamp(1e-12, 1.0 - 1e-12)
        / (1.0 - spec.onset_probability.clamp(1e-12, 1.0 - 1e-12)))
    .ln();
    let every = spec.onset_every.max(1);

    let cells = n * t_len;
    let mut treat = vec![Some(false); cells];
    let mut y = vec![None; cells];
    let mut x = vec![None; cells];
    let mut group = vec![None; cells];
    for i in 0..n {
        let mut xs = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            xs.push(x_level[i] + normal(0.2).sample(&mut rng));
        }
        let mut status = vec![false; t_len];
        let mut since = vec![0usize; t_len];
        let mut first_onset = None;
        let mut on = false;
        let mut k = 0;
        for t in 0..t_len {
            if on {
                if rng.random::<f64>() < spec.reversal_probability {
                    on = false;
                } else {
                    k += 1;
                }
            } else if t >= spec.first_onset && t % every == 0 {
                let p = sigmoid(base_logit + spec.confounding * xs[t]);
                if rng.random::<f64>() < p {
                    on = true;
                    k = 0;
                    first_onset.get_or_insert(t);
                }
            }
            status[t] = on;
            since[t] = k;
        }
        for t in 0..t_len {
            let cell = i * t_len + t;
            let mut v = alpha[i] + gamma[t] + spec.covariate_effect * xs[t];
            if status[t] {
                let idx = since[t].min(spec.effect.len().saturating_sub(1));
                v += spec.effect.get(idx).copied().unwrap_or(0.0);
            }
            if let Some(s) = first_onset {
                if t < s {
                    v -= spec.pretrend * ((s - 1 - t).min(spec.pretrend_window)) as f64;
                }
            }
            v += normal(spec.noise_sd).sample(&mut rng);
            let missing = rng.random::<f64>() < spec.missing_outcome_probability;
            treat[cell] = Some(status[t]);
            y[cell] = (!missing).then_some(v);
            x[cell] = Some(xs[t]);
            if spec.n_groups > 0 {
                group[cell] = Some(format!("g{}", i % spec.n_groups));
            }
        }
    }
    let mut covs = IndexMap::new();
    covs.insert("x".to_string(), x);
    let panel = PanelData::from_grids(
        ColumnNames::new("unit", "time", "treat", "y"),
        (1..=n as i64).map(UnitId::Int).collect(),
        (1..=t_len as i64).collect(),
        treat,
        y,
        covs,
    )
    .expect("generated grids are consistent");
    if spec.n_groups > 0 {
        panel.with_categorical("group", group).expect("group grid is consistent")
    } else {
        panel
    }
}

/// Small panels with arbitrary treatment patterns for oracle comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomPanelSpec {
    pub n_units: usize,
    pub n_periods: usize,
    pub treated_probability: f64,
    pub missing_treatment_probability: f64,
    pub missing_outcome_probability: f64,
    pub missing_covariate_probability: f64,
    /// Number of numeric covariates `x1..xk`.
    pub n_covariates: usize,
    pub seed: u64,
}

impl Default for RandomPanelSpec {
    fn default() -> Self {
        Self {
            n_units: 8,
            n_periods: 8,
            treated_probability: 0.4,
            missing_treatment_probability: 0.0,
            missing_outcome_probability: 0.0,
            missing_covariate_probability: 0.0,
            n_covariates: 2,
            seed: 0,
        }
    }
}

/// Independent per-cell draws: treatment is Bernoulli, outcomes and
/// covariates are standard normal, each with optional missingness.
pub fn random_panel(spec: &RandomPanelSpec) -> PanelData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = spec.n_units * spec.n_periods;
    let std = normal(1.0);
    let mut treat = Vec::with_capacity(cells);
    let mut y = Vec::with_capacity(cells);
    for _ in 0..cells {
        let d = rng.random::<f64>() < spec.treated_probability;
        let md = rng.random::<f64>() < spec.missing_treatment_probability;
        treat.push((!md).then_some(d));
        let v = std.sample(&mut rng);
        let my = rng.random::<f64>() < spec.missing_outcome_probability;
        y.push((!my).then_some(v));
    }
    let mut covs = IndexMap::new();
    for k in 1..=spec.n_covariates {
        let col = (0..cells)
            .map(|_| {
                let v = std.sample(&mut rng);
                let m = rng.random::<f64>() < spec.missing_covariate_probability;
                (!m).then_some(v)
            })
            .collect();
        covs.insert(format!("x{k}"), col);
    }
    PanelData::from_grids(
        ColumnNames::new("unit", "time", "treat", "y"),
        (1..=spec.n_units as i64).map(UnitId::Int).collect(),
        (1..=spec.n_periods as i64).collect(),
        treat,
        y,
        covs,
    )
    .expect("generated grids are consistent")
}

/// Copy of `panel` with outcomes and numeric covariates passed through the
/// given maps, called as `f(unit, period, value)` and
/// `g(name, unit, period, value)`.
pub fn map_panel(
    panel: &PanelData,
    f: impl Fn(usize, usize, Option<f64>) -> Option<f64>,
    g: impl Fn(&str, usize, usize, Option<f64>) -> Option<f64>,
) -> PanelData {
    let (n, t_len) = (panel.n_units(), panel.n_periods());
    let cells = |h: &dyn Fn(usize, usize) -> Option<f64>| -> Vec<Option<f64>> {
        (0..n).flat_map(|u| (0..t_len).map(move |t| (u, t))).map(|(u, t)| h(u, t)).collect()
    };
    let treat = (0..n)
        .flat_map(|u| (0..t_len).map(move |t| (u, t)))
        .map(|(u, t)| panel.treatment(u, t))
        .collect();
    let y = cells(&|u, t| f(u, t, panel.outcome(u, t)));
    let mut covs = IndexMap::new();
    for name in panel.covariate_names() {
        let s = panel.series(name).expect("listed covariate exists");
        covs.insert(name.to_string(), cells(&|u, t| g(name, u, t, s.get(u, t))));
    }
    let mut out = PanelData::from_grids(
        panel.columns().clone(),
        panel.units().to_vec(),
        panel.times().to_vec(),
        treat,
        y,
        covs,
    )
    .expect("same shape as the source panel");
    let names: Vec<String> = panel.categorical_names().map(String::from).collect();
    for name in names {
        let vals = (0..n)
            .flat_map(|u| (0..t_len).map(move |t| (u, t)))
            .map(|(u, t)| panel.level(&name, u, t).expect("listed column exists"))
            .collect();
        out = out.with_categorical(&name, vals).expect("same shape");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_panel() {
        let s = SyntheticSpec::default();
        assert_eq!(generate_panel(&s), generate_panel(&s));
        let r = RandomPanelSpec::default();
        assert_eq!(random_panel(&r), random_panel(&r));
    }

    #[test]
    fn onsets_only_on_eligible_periods() {
        let s = SyntheticSpec {
            onset_every: 3,
            ..SyntheticSpec::default()
        };
        let p = generate_panel(&s);
        for u in 0..p.n_units() {
            for t in 1..p.n_periods() {
                if p.treatment(u, t) == Some(true) && p.treatment(u, t - 1) == Some(false) {
                    assert_eq!(t % 3, 0);
                    assert!(t >= s.first_onset);
                }
            }
        }
    }

    #[test]
    fn groups_are_categorical() {
        let s = SyntheticSpec {
            n_groups: 2,
            ..SyntheticSpec::default()
        };
        let p = generate_panel(&s);
        assert_eq!(p.level("group", 1, 0).unwrap().as_deref(), Some("g1"));
    }
}
