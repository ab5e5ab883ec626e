//! Synthetic panels with planted effects, and brute-force oracles that
//! recompute matching, estimation and balance without touching the
//! arithmetic in `panelmatch`.

pub mod oracle;
pub mod synthetic;

pub use oracle::{
    brute_force_balance, brute_force_estimate, brute_force_matched_sets, brute_force_offset_estimate,
    brute_force_set_effects, gauss_jordan_inverse, logistic_grid_search,
    oracle_mahalanobis, OracleError,
};
pub use synthetic::{generate_panel, map_panel, random_panel, RandomPanelSpec, SyntheticSpec};
