mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use oopsim::counterfactuals::counterfactual_names;
use oopsim::Error;

/// Household medical-spending microsimulation with delayed, noisy bills.
#[derive(Debug, Parser)]
#[command(name = "oopsim", version)]
pub struct Cli {
    /// Master seed (default: `[run] seed` from the config, then 20240517).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic population and the bill-delay pmf.
    Generate,
    /// Simulate an observed panel with claims and index events.
    Simulate(SimulateArgs),
    /// Grid-search the signal parameters on an observed panel.
    Estimate(EstimateArgs),
    /// Re-simulate under a different information regime.
    Counterfactual(CounterfactualArgs),
    /// Poisson triple difference of spending on post-service and post-bill indicators.
    Tripdiff(PanelArgs),
    /// Weekly bill effects around the first bill.
    Eventstudy(EventStudyArgs),
    /// Triple difference under randomly reassigned billing delays.
    Placebo(PlaceboArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Population CSV from `generate` (default: draw one from the config).
    #[arg(long)]
    pub population: Option<PathBuf>,
    /// Parameter JSON (estimate output or simulation parameters) overriding the config.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub replicate: u64,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Observed panel CSV.
    #[arg(long)]
    pub observed: PathBuf,
    /// Population CSV (default: population.csv next to the panel).
    #[arg(long)]
    pub population: Option<PathBuf>,
    /// Claims CSV with bill timing (default: claims.csv next to the panel, if present).
    #[arg(long)]
    pub claims: Option<PathBuf>,
    /// Ignore claim timing and simulate bill delays.
    #[arg(long, conflicts_with = "claims")]
    pub no_claims: bool,
    /// Bill-delay pmf CSV (default: delays.csv next to the panel, then the config).
    #[arg(long)]
    pub delays: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CounterfactualArgs {
    /// Baseline parameter JSON (estimate output or simulation parameters).
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(counterfactual_names()))]
    pub mode: String,
    /// Population CSV (default: draw one from the config).
    #[arg(long)]
    pub population: Option<PathBuf>,
    /// Replicates per household-year (default: `[counterfactual] replicates`).
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PanelArgs {
    /// Panel CSV with index-event indicators.
    #[arg(long)]
    pub panel: PathBuf,
}

#[derive(Debug, Args)]
pub struct EventStudyArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    /// Index events CSV (default: recovered from the panel indicators).
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Window T (default: `[econometrics] event_window`).
    #[arg(long)]
    pub window: Option<u32>,
}

#[derive(Debug, Args)]
pub struct PlaceboArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Bill-delay pmf CSV (default: the config's pmf).
    #[arg(long)]
    pub delays: Option<PathBuf>,
    /// Number of reassignments (default: `[econometrics] placebo_draws`).
    #[arg(long)]
    pub draws: Option<usize>,
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut body = json!({ "kind": e.kind(), "message": e.to_string() });
    match e {
        Error::Config { location, message } => {
            body["location"] = json!(location);
            body["message"] = json!(message);
        }
        Error::FileNotFound(path) => body["path"] = json!(path.display().to_string()),
        Error::RankDeficient { column } => body["column"] = json!(column),
        Error::NonConvergence { iterations, trace } => {
            body["iterations"] = json!(iterations);
            body["deviance_trace"] = json!(trace);
        }
        _ => {}
    }
    json!({ "error": body })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(1)
        }
    }
}
