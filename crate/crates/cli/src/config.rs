//! Run configuration files.

use std::path::{Path, PathBuf};

use panelmatch::{
    ColumnNames, CovariateSpec, EstimateOptions, MatchSpec, Qoi, RefinementMethod, RefinementSpec,
    SeMethod,
};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Code};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Columns {
    pub unit: String,
    pub time: String,
    pub treatment: String,
    pub outcome: String,
}

fn default_method() -> RefinementMethod {
    RefinementMethod::None
}
fn default_size_match() -> usize {
    5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementSection {
    #[serde(default = "default_method")]
    pub method: RefinementMethod,
    #[serde(default)]
    pub covariates: CovariateSpec,
    #[serde(default = "default_size_match")]
    pub size_match: usize,
    #[serde(default = "default_true")]
    pub use_diagonal_variance: bool,
}

impl Default for RefinementSection {
    fn default() -> Self {
        Self {
            method: default_method(),
            covariates: CovariateSpec::default(),
            size_match: default_size_match(),
            use_diagonal_variance: true,
        }
    }
}

fn default_se() -> SeMethod {
    SeMethod::Bootstrap
}
fn default_iterations() -> usize {
    1000
}
fn default_confidence() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    #[serde(default = "default_se")]
    pub se_method: SeMethod,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub pooled: bool,
    #[serde(default)]
    pub moderator: Option<String>,
    #[serde(default)]
    pub include_placebo: bool,
}

impl Default for EstimationSection {
    fn default() -> Self {
        Self {
            se_method: default_se(),
            iterations: default_iterations(),
            seed: 0,
            confidence: default_confidence(),
            pooled: false,
            moderator: None,
            include_placebo: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceSection {
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "default_true")]
    pub include_unrefined: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub columns: Columns,
    pub qoi: Qoi,
    pub lag: usize,
    pub leads: Vec<usize>,
    #[serde(default)]
    pub match_missing: bool,
    #[serde(default)]
    pub forbid_treatment_reversal: bool,
    #[serde(default)]
    pub placebo_test: bool,
    #[serde(default)]
    pub refinement: RefinementSection,
    #[serde(default)]
    pub estimation: EstimationSection,
    #[serde(default)]
    pub balance: BalanceSection,
}

/// A parsed configuration together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    /// Hex SHA-256 of the raw configuration bytes.
    pub sha256: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::new(Code::ConfigRead, format!("cannot read config {}: {e}", path.display()))
        })?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::new(Code::ConfigParse, "config is not valid UTF-8"))?;
        let config = RunConfig::parse(&text)?;
        Ok(Self {
            config,
            path: path.to_path_buf(),
            sha256: hex(&Sha256::digest(&bytes)),
        })
    }

    /// Label used for multi-config outputs: the file stem.
    pub fn label(&self) -> String {
        self.path
            .file_stem()
            .map_or_else(|| "config".into(), |s| s.to_string_lossy().into_owned())
    }

    /// Data path, resolved against the config file's directory.
    pub fn data_path(&self) -> PathBuf {
        if self.config.data.is_absolute() {
            return self.config.data.clone();
        }
        self.path
            .parent()
            .map_or_else(|| self.config.data.clone(), |d| d.join(&self.config.data))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| CliError::new(Code::ConfigParse, e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Rejects inconsistent combinations before any data is read.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.lag < 1 {
            return Err(CliError::new(Code::InvalidValue, "lag must be at least 1"));
        }
        if self.leads.is_empty() {
            return Err(CliError::new(Code::InvalidValue, "leads must not be empty"));
        }
        let est = &self.estimation;
        if !(est.confidence > 0.0 && est.confidence < 1.0) {
            return Err(CliError::new(
                Code::InvalidValue,
                "estimation.confidence must lie strictly between 0 and 1",
            ));
        }
        if est.se_method == SeMethod::Bootstrap && est.iterations < 2 {
            return Err(CliError::new(
                Code::InvalidValue,
                "estimation.iterations must be at least 2 for the bootstrap",
            ));
        }
        if est.se_method != SeMethod::Bootstrap && self.qoi == Qoi::Ate {
            return Err(CliError::new(
                Code::AnalyticalSeForAte,
                format!("se_method `{}` is not available for the ate; use bootstrap", est.se_method.as_str()),
            ));
        }
        if est.se_method != SeMethod::Bootstrap && est.pooled {
            return Err(CliError::new(
                Code::AnalyticalSePooled,
                format!("pooled estimates need bootstrap standard errors, not `{}`", est.se_method.as_str()),
            ));
        }
        if est.include_placebo && !self.placebo_test {
            return Err(CliError::new(
                Code::PlaceboWithoutFlag,
                "estimation.include_placebo requires placebo_test = true",
            ));
        }
        if est.include_placebo && self.lag < 2 {
            return Err(CliError::new(Code::InvalidValue, "placebo tests need lag >= 2"));
        }
        self.refinement_spec()
            .validate()
            .map_err(|e| CliError::new(Code::InvalidRefinement, e.to_string()))?;
        Ok(())
    }

    pub fn column_names(&self) -> ColumnNames {
        let c = &self.columns;
        ColumnNames::new(&c.unit, &c.time, &c.treatment, &c.outcome)
    }

    pub fn match_spec(&self) -> MatchSpec {
        let mut spec = MatchSpec::new(self.qoi, self.lag, self.leads.clone());
        spec.match_missing = self.match_missing;
        spec.forbid_treatment_reversal = self.forbid_treatment_reversal;
        spec.placebo_test = self.placebo_test;
        spec
    }

    pub fn refinement_spec(&self) -> RefinementSpec {
        let r = &self.refinement;
        RefinementSpec {
            method: r.method,
            covariates: r.covariates.clone(),
            size_match: r.size_match,
            use_diagonal_variance: r.use_diagonal_variance,
        }
    }

    pub fn estimate_options(&self, seed_override: Option<u64>) -> EstimateOptions {
        let e = &self.estimation;
        EstimateOptions {
            se_method: e.se_method,
            iterations: e.iterations,
            seed: seed_override.unwrap_or(e.seed),
            confidence: e.confidence,
            pooled: e.pooled,
            moderator: e.moderator.clone(),
            include_placebo: e.include_placebo,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
data = "panel.csv"
qoi = "att"
lag = 3
leads = [0, 1]

[columns]
unit = "unit"
time = "time"
treatment = "treat"
outcome = "y"
"#;

    #[test]
    fn defaults_apply() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!(c.refinement.size_match, 5);
        assert_eq!(c.estimation.se_method, SeMethod::Bootstrap);
        assert_eq!(c.estimation.iterations, 1000);
        assert_eq!(c.estimation.confidence, 0.95);
        assert!(!c.match_missing && !c.forbid_treatment_reversal);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse(&format!("{BASE}\n[estimation]\nbogus = 1\n")).unwrap_err();
        assert_eq!(err.code, Code::ConfigParse);
        let err = RunConfig::parse(&format!("extra = 1\n{BASE}")).unwrap_err();
        assert_eq!(err.code, Code::ConfigParse);
    }

    #[test]
    fn inconsistent_combinations_have_distinct_codes() {
        let ate = BASE.replace("\"att\"", "\"ate\"");
        let e1 = RunConfig::parse(&format!("{ate}\n[estimation]\nse_method = \"conditional\"\n")).unwrap_err();
        let e2 = RunConfig::parse(&format!("{BASE}\n[estimation]\nse_method = \"unconditional\"\npooled = true\n"))
            .unwrap_err();
        let e3 = RunConfig::parse(&format!("{BASE}\n[estimation]\ninclude_placebo = true\n")).unwrap_err();
        let e4 = RunConfig::parse(&format!("{BASE}\n[refinement]\nmethod = \"mahalanobis\"\n")).unwrap_err();
        let codes = [e1.code, e2.code, e3.code, e4.code];
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                assert_ne!(codes[i], codes[j]);
            }
        }
    }

    #[test]
    fn covariate_terms_parse() {
        let c = RunConfig::parse(&format!(
            "{BASE}\n[refinement]\nmethod = \"mahalanobis\"\ncovariates = [{{ name = \"x\", lags = \"0:4\" }}, {{ name = \"y\", lags = \"1:4\", power = 2 }}]\n"
        ))
        .unwrap();
        assert_eq!(c.refinement_spec().covariates.width(), 9);
    }
}
