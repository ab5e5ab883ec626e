//! Matching methods for causal inference on time-series cross-sectional data.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`panel`] ingests a long-format panel and balances it onto a complete
//!    unit × period grid.
//! 2. [`matching`] finds treated observations for a quantity of interest and
//!    builds matched sets of control units with identical treatment histories
//!    over the lag window.
//! 3. [`refinement`] weights the controls inside each matched set
//!    (Mahalanobis or propensity-score matching, or propensity weighting) and
//!    [`balance`] reports standardized covariate balance before and after.
//! 4. [`estimation`] computes difference-in-differences estimates per lead
//!    with bootstrap or analytical standard errors, and [`diagnostics`]
//!    provides set-level effects and placebo tests.

pub mod balance;
pub mod diagnostics;
pub mod error;
pub mod estimation;
pub mod matching;
pub mod panel;
pub mod refinement;
pub mod stats;

pub use balance::{aggregate_balance, balance_scatter_data, BalanceTable, ScatterRow};
pub use diagnostics::{placebo_test, set_level_effects, SetEffects};
pub use error::{Error, ErrorKind, Result};
pub use estimation::{
    ate_estimate, estimate, point_estimate, wstar_weights, EstimateOptions, EstimateResult,
    EstimationWeights, LeadEstimate, SeMethod,
};
pub use matching::{
    build_matched_sets, find_treated_observations, MatchSpec, MatchedSet, MatchedSets, PanelMatch,
    Qoi, SetKind,
};
pub use panel::{ColumnNames, PanelData, PanelSummary, UnitId};
pub use refinement::{
    refine, refine_match, CovariateSpec, CovariateTerm, PropensityModel, RefinementMethod,
    RefinementSpec,
};
