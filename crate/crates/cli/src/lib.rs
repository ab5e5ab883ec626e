//! Command-line driver: reads a run configuration and a long-format panel,
//! runs the matching pipeline and writes reports.

pub mod config;
pub mod error;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use panelmatch::diagnostics::set_level_effects;
use panelmatch::matching::MatchedSets;
use panelmatch::panel::write_treatment_grid_csv;
use panelmatch::refinement::{refine_match, write_weights_csv, RefinementDiagnostics};
use panelmatch::{
    aggregate_balance, balance::write_scatter_csv, balance_scatter_data, build_matched_sets,
    estimate, PanelData, PanelMatch,
};
use serde::Serialize;

pub use config::{LoadedConfig, RunConfig};
pub use error::{CliError, Code};

#[derive(Debug, Parser)]
#[command(name = "panelmatch", version, about = "Matching estimators for panel data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Panel summary and treatment-distribution grid.
    Inspect(CommonArgs),
    /// Matched sets, refinement weights and set-size summaries.
    Match(CommonArgs),
    /// Covariate balance tables; accepts several configs.
    Balance(CommonArgs),
    /// Point estimates and standard errors.
    Estimate(CommonArgs),
    /// Per-set effects at every lead.
    SetEffects(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML). Repeat for `balance` to compare configurations.
    #[arg(long, required = true)]
    pub config: Vec<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides the bootstrap seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Inspect(_) => "inspect",
            Command::Match(_) => "match",
            Command::Balance(_) => "balance",
            Command::Estimate(_) => "estimate",
            Command::SetEffects(_) => "set-effects",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Inspect(a)
            | Command::Match(a)
            | Command::Balance(a)
            | Command::Estimate(a)
            | Command::SetEffects(a) => a,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: String,
    config_sha256: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    metadata: &'a Metadata<'a>,
    result: T,
}

struct Writer<'a> {
    dir: PathBuf,
    meta: Metadata<'a>,
    written: Vec<PathBuf>,
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(Code::Output, format!("cannot write {}: {e}", path.display()))
}

impl<'a> Writer<'a> {
    fn json<T: Serialize>(&mut self, name: &str, payload: T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let doc = Document {
            metadata: &self.meta,
            result: payload,
        };
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| output_error(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| output_error(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn csv(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut Vec<u8>) -> panelmatch::Result<()>,
    ) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut buf = format!(
            "# {} {} command={} config_sha256={}\n",
            self.meta.tool, self.meta.version, self.meta.command, self.meta.config_sha256
        )
        .into_bytes();
        body(&mut buf).map_err(|e| output_error(&path, e))?;
        fs::write(&path, buf).map_err(|e| output_error(&path, e))?;
        self.written.push(path);
        Ok(())
    }
}

fn load_panel(cfg: &LoadedConfig) -> Result<PanelData, CliError> {
    let path = cfg.data_path();
    PanelData::from_csv_path(&path, &cfg.config.column_names()).map_err(|e| match e {
        panelmatch::Error::Io(io) => {
            CliError::new(Code::DataRead, format!("cannot read data {}: {io}", path.display()))
        }
        other => other.into(),
    })
}

fn refined_match(
    cfg: &RunConfig,
    panel: &PanelData,
) -> Result<(PanelMatch, Vec<RefinementDiagnostics>), CliError> {
    let pm = build_matched_sets(panel, &cfg.match_spec())?;
    Ok(refine_match(panel, &pm, &cfg.refinement_spec())?)
}

fn output_dir(args: &CommonArgs, cfg: &LoadedConfig) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    match &cfg.config.output {
        Some(o) if o.is_absolute() => o.clone(),
        Some(o) => cfg.path.parent().map_or_else(|| o.clone(), |d| d.join(o)),
        None => PathBuf::from("."),
    }
}

#[derive(Serialize)]
struct MatchSummary<'a> {
    qoi: &'static str,
    summary: panelmatch::matching::SetSizeSummary,
    size_distribution: panelmatch::matching::SizeDistribution,
    refinement: &'a RefinementDiagnostics,
}

fn write_size_csv(sets: &MatchedSets, buf: &mut Vec<u8>) -> panelmatch::Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["size", "count"])?;
    for (size, count) in sets.size_distribution().counts {
        w.write_record([size.to_string(), count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Runs one command and returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let args = cli.command.args();
    if let Some(0) = args.threads {
        return Err(CliError::new(Code::Usage, "--threads must be at least 1"));
    }
    if args.config.len() > 1 && !matches!(cli.command, Command::Balance(_)) {
        return Err(CliError::new(
            Code::Usage,
            format!("`{}` takes exactly one --config", cli.command.name()),
        ));
    }
    let configs = args
        .config
        .iter()
        .map(|p| LoadedConfig::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let body = || run_loaded(cli, &configs);
    match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::new(Code::Usage, format!("cannot start {n} threads: {e}")))?
            .install(body),
        None => body(),
    }
}

fn run_loaded(cli: &Cli, configs: &[LoadedConfig]) -> Result<Vec<PathBuf>, CliError> {
    let args = cli.command.args();
    let command = cli.command.name();
    let first = &configs[0];
    let dir = output_dir(args, first);
    fs::create_dir_all(&dir).map_err(|e| output_error(&dir, e))?;
    let meta = |cfg: &'_ LoadedConfig, seed| Metadata {
        tool: "panelmatch",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: cfg.label(),
        config_sha256: "",
        seed,
    };
    let mut written = Vec::new();

    for cfg in configs {
        let c = &cfg.config;
        let seed = matches!(cli.command, Command::Estimate(_))
            .then(|| c.estimate_options(args.seed).seed);
        let mut w = Writer {
            dir: dir.clone(),
            meta: Metadata {
                config_sha256: &cfg.sha256,
                ..meta(cfg, seed)
            },
            written: Vec::new(),
        };
        let panel = load_panel(cfg)?;
        match &cli.command {
            Command::Inspect(_) => {
                w.json("summary.json", panel.summarize())?;
                let grid = panel.treatment_grid();
                w.csv("treatment_grid.csv", |b| write_treatment_grid_csv(&grid, b))?;
            }
            Command::Match(_) => {
                let (pm, diags) = refined_match(c, &panel)?;
                for (sets, diag) in pm.components.iter().zip(&diags) {
                    let k = sets.kind.as_str();
                    w.json(&format!("matched_sets_{k}.json"), sets.to_doc(&panel))?;
                    w.json(
                        &format!("set_summary_{k}.json"),
                        MatchSummary {
                            qoi: k,
                            summary: sets.set_size_summary(),
                            size_distribution: sets.size_distribution(),
                            refinement: diag,
                        },
                    )?;
                    w.csv(&format!("set_sizes_{k}.csv"), |b| write_size_csv(sets, b))?;
                    w.csv(&format!("weights_{k}.csv"), |b| write_weights_csv(&panel, sets, b))?;
                }
            }
            Command::Balance(_) => {
                let covariates = if c.balance.covariates.is_empty() {
                    let mut names: Vec<String> = Vec::new();
                    for t in &c.refinement.covariates.terms {
                        if !names.contains(&t.name) {
                            names.push(t.name.clone());
                        }
                    }
                    names
                } else {
                    c.balance.covariates.clone()
                };
                if covariates.is_empty() {
                    return Err(CliError::new(
                        Code::InvalidValue,
                        "balance.covariates is empty and the refinement names no covariates",
                    ));
                }
                let (pm, _) = refined_match(c, &panel)?;
                let label = sanitize(&cfg.label());
                for sets in &pm.components {
                    let k = sets.kind.as_str();
                    let table = aggregate_balance(&panel, sets, &covariates, c.balance.include_unrefined)?
                        .with_label(&cfg.label());
                    w.csv(&format!("balance_{label}_{k}.csv"), |b| table.write_csv(b))?;
                    if c.balance.include_unrefined {
                        let rows = balance_scatter_data(&table)?;
                        w.csv(&format!("balance_scatter_{label}_{k}.csv"), |b| {
                            write_scatter_csv(&rows, b)
                        })?;
                    }
                }
            }
            Command::Estimate(_) => {
                let (pm, _) = refined_match(c, &panel)?;
                let opts = c.estimate_options(args.seed);
                let result = estimate(&panel, &pm, &opts)?;
                w.json("estimate.json", &result)?;
                if let Some(p) = &result.placebo {
                    w.json("placebo.json", p)?;
                }
                if let (Some(levels), Some(name)) = (&result.moderator, &opts.moderator) {
                    for (level, r) in levels {
                        w.json(
                            &format!("estimate_{}_{}.json", sanitize(name), sanitize(level)),
                            r,
                        )?;
                    }
                }
            }
            Command::SetEffects(_) => {
                let (pm, _) = refined_match(c, &panel)?;
                for sets in &pm.components {
                    let effects = set_level_effects(&panel, sets, &c.leads)?;
                    w.csv(&format!("set_effects_{}.csv", sets.kind.as_str()), |b| effects.write_csv(b))?;
                }
            }
        }
        written.extend(w.written);
    }
    Ok(written)
}
