//! Set-level effects and placebo tests.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{contributions, estimate_offsets, EstimateOptions, EstimateResult};
use crate::matching::{MatchedSets, PanelMatch, SetKind};
use crate::panel::PanelData;

/// Effect of each matched set at each lead. Effects carry the family's
/// contrast orientation, so their mean over usable sets is the point
/// estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEffects {
    pub qoi: SetKind,
    pub keys: Vec<String>,
    pub leads: Vec<usize>,
    /// `effects[lead][set]`; `None` for empty or outcome-deficient sets.
    pub effects: Vec<Vec<Option<f64>>>,
}

pub fn set_level_effects(panel: &PanelData, sets: &MatchedSets, leads: &[usize]) -> Result<SetEffects> {
    let mut effects = Vec::with_capacity(leads.len());
    for &f in leads {
        let mut row = vec![None; sets.sets.len()];
        let (contribs, _) = contributions(panel, sets, f as isize)?;
        for c in &contribs {
            row[c.set_index] = Some(c.effect(panel));
        }
        effects.push(row);
    }
    Ok(SetEffects {
        qoi: sets.kind,
        keys: sets.sets.iter().map(|s| s.key(panel)).collect(),
        leads: leads.to_vec(),
        effects,
    })
}

impl SetEffects {
    /// Mean over sets with an effect at lead index `k`.
    pub fn mean(&self, k: usize) -> Option<f64> {
        let vals: Vec<f64> = self.effects[k].iter().flatten().copied().collect();
        crate::stats::mean(&vals)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["treated_key", "lead", "effect"])?;
        for (k, lead) in self.leads.iter().enumerate() {
            for (key, e) in self.keys.iter().zip(&self.effects[k]) {
                let e = e.map_or_else(|| "NA".to_string(), |v| v.to_string());
                w.write_record([key.clone(), lead.to_string(), e])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Pseudo-effects on pre-treatment outcomes: for each `l = 2..=L`, the
/// change from `t - 1` to `t - l` in the treated unit against the weighted
/// controls, with the standard errors requested in `opts`.
pub fn placebo_test(panel: &PanelData, pm: &PanelMatch, opts: &EstimateOptions) -> Result<EstimateResult> {
    let spec = pm.spec();
    if !spec.placebo_test {
        return Err(Error::PlaceboNotEnabled);
    }
    if spec.lag < 2 {
        return Err(Error::InvalidSpec("placebo tests need a lag of at least 2".into()));
    }
    if opts.pooled {
        return Err(Error::InvalidSpec("pooled placebo estimates are not defined".into()));
    }
    let offsets: Vec<isize> = (2..=spec.lag as isize).map(|l| -l).collect();
    let comps: Vec<&MatchedSets> = pm.components.iter().collect();
    estimate_offsets(panel, &comps, pm.qoi, &offsets, opts)
}
