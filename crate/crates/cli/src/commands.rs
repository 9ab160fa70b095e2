use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::json;

use oopsim::config::{parse_config, Config};
use oopsim::counterfactuals::{counterfactual_by_name, run_counterfactual, CounterfactualConfig};
use oopsim::econometrics::{event_study, events_from_panel, placebo, triple_diff};
use oopsim::estimation::{estimate, EstimationResult, ObservedData};
use oopsim::rng::DEFAULT_SEED;
use oopsim::simulator::panel::{read_claims_file, read_panel_file, write_claims_file, write_panel_file};
use oopsim::simulator::{
    generate_population, mark_index_events, read_events_file, simulate_panel, write_events_file, BillDelayDistribution,
    EventSpec, IndexEvent, PanelRecord, Population, SimParams, SimulationSetup,
};
use oopsim::stats::mean;
use oopsim::{Error, Result};

use crate::manifest::{digest, Manifest};
use crate::{Cli, Command, PanelArgs};

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Simulate(_) => "simulate",
            Command::Estimate(_) => "estimate",
            Command::Counterfactual(_) => "counterfactual",
            Command::Tripdiff(_) => "tripdiff",
            Command::Eventstudy(_) => "eventstudy",
            Command::Placebo(_) => "placebo",
        }
    }
}

struct Run<'a> {
    cfg: Config,
    seed: u64,
    out: &'a Path,
    manifest: Manifest,
    files: Vec<PathBuf>,
}

impl Run<'_> {
    fn output(&mut self, name: &str) -> PathBuf {
        let path = self.out.join(name);
        self.files.push(path.clone());
        path
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.output(name);
        fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    fn population(&mut self, file: Option<&Path>) -> Result<Population> {
        match file {
            Some(path) => {
                self.manifest.input("population", path)?;
                Population::read_csv(path)
            }
            None => generate_population(&self.cfg.population, self.seed),
        }
    }

    fn delays(&mut self, file: Option<&Path>) -> Result<BillDelayDistribution> {
        match file {
            Some(path) => {
                self.manifest.input("delays", path)?;
                BillDelayDistribution::read_csv(path)
            }
            None => Ok(self.cfg.delays.clone()),
        }
    }

    fn panel(&mut self, args: &PanelArgs) -> Result<Vec<PanelRecord>> {
        self.manifest.input("panel", &args.panel)?;
        read_panel_file(&args.panel)
    }

    fn events(&mut self, file: Option<&Path>, records: &[PanelRecord]) -> Result<Vec<IndexEvent>> {
        match file {
            Some(path) => {
                self.manifest.input("events", path)?;
                read_events_file(path)
            }
            None => Ok(events_from_panel(records)),
        }
    }
}

fn sibling(file: &Path, name: &str) -> PathBuf {
    file.parent().unwrap_or(Path::new("")).join(name)
}

/// Baseline parameters from an `estimate` result or a bare parameter object.
fn load_params(path: &Path) -> Result<SimParams> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let params = if value.get("best_params").is_some() {
        serde_json::from_value::<EstimationResult>(value)?.sim_params()
    } else {
        serde_json::from_value::<SimParams>(value)?
    };
    params.validate()?;
    Ok(params)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::input(format!("cannot start {n} threads: {e}")))?;
    }
    let cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => Config::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    fs::create_dir_all(&cli.out)?;

    let mut manifest = Manifest::new(cli.command.name(), seed);
    if let Some(path) = &cli.config {
        manifest.config = Some(digest(path)?);
        for (i, input) in cfg.inputs.iter().enumerate() {
            manifest.input(&format!("config_input_{i}"), input)?;
        }
    }
    let mut run = Run {
        cfg,
        seed,
        out: &cli.out,
        manifest,
        files: Vec::new(),
    };
    info!("{} with seed {seed}", cli.command.name());

    let summary = match &cli.command {
        Command::Generate => generate(&mut run)?,
        Command::Simulate(a) => {
            run.manifest.option("replicate", a.replicate);
            let params = match &a.params {
                Some(p) => {
                    run.manifest.input("params", p)?;
                    load_params(p)?
                }
                None => run.cfg.params,
            };
            let population = run.population(a.population.as_deref())?;
            simulate(&mut run, population, params, a.replicate)?
        }
        Command::Estimate(a) => {
            run.manifest.input("observed", &a.observed)?;
            let records = read_panel_file(&a.observed)?;
            let pop_path = a.population.clone().unwrap_or_else(|| sibling(&a.observed, "population.csv"));
            let population = run.population(Some(&pop_path))?;
            let claims_path = match (&a.claims, a.no_claims) {
                (_, true) => None,
                (Some(p), _) => Some(p.clone()),
                (None, _) => Some(sibling(&a.observed, "claims.csv")).filter(|p| p.exists()),
            };
            let claims = match &claims_path {
                Some(p) => {
                    run.manifest.input("claims", p)?;
                    Some(read_claims_file(p)?)
                }
                None => None,
            };
            let delay_path = a.delays.clone().or_else(|| Some(sibling(&a.observed, "delays.csv")).filter(|p| p.exists()));
            let delays = run.delays(delay_path.as_deref())?;
            let data = ObservedData { population, records, claims };
            estimate_cmd(&mut run, &data, &delays)?
        }
        Command::Counterfactual(a) => {
            run.manifest.input("params", &a.params)?;
            run.manifest.option("mode", &a.mode);
            let params = load_params(&a.params)?;
            let population = run.population(a.population.as_deref())?;
            let replicates = a.replicates.unwrap_or(run.cfg.counterfactual_replicates);
            run.manifest.option("replicates", replicates);
            counterfactual(&mut run, &a.mode, &population, &params, replicates)?
        }
        Command::Tripdiff(a) => {
            let records = run.panel(a)?;
            let td = triple_diff(&records)?;
            run.write_json("tripdiff.json", &td)?;
            json!({
                "beta_post_service": td.beta_post_service,
                "beta_post_bill": td.beta_post_bill,
                "post_bill": td.fit.coefficient("post_bill"),
            })
        }
        Command::Eventstudy(a) => {
            let records = run.panel(&a.panel)?;
            let events = run.events(a.events.as_deref(), &records)?;
            let window = a.window.unwrap_or(run.cfg.econometrics.event_window);
            run.manifest.option("window", window);
            let es = event_study(&records, &events, window)?;
            run.write_json("eventstudy.json", &es)?;
            json!({ "window": es.window, "points": es.points })
        }
        Command::Placebo(a) => {
            let records = run.panel(&a.panel)?;
            let events = run.events(a.events.as_deref(), &records)?;
            let delays = run.delays(a.delays.as_deref())?;
            let draws = a.draws.unwrap_or(run.cfg.econometrics.placebo_draws);
            run.manifest.option("draws", draws);
            let p = placebo(&records, &events, &delays, draws, run.seed)?;
            run.write_json("placebo.json", &p)?;
            json!({
                "actual": p.actual,
                "mean": p.mean,
                "sd": p.sd,
                "p05": p.p05,
                "p95": p.p95,
                "actual_rank": p.actual_rank,
            })
        }
    };

    let Run { manifest, files, out, .. } = run;
    let manifest_path = manifest.finish(out, &files)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "result": summary, "manifest": manifest_path.display().to_string() }))?
    );
    Ok(())
}

fn generate(run: &mut Run<'_>) -> Result<serde_json::Value> {
    let population = generate_population(&run.cfg.population, run.seed)?;
    population.write_csv(&run.output("population.csv"))?;
    let delays_path = run.output("delays.csv");
    run.cfg.delays.write_csv(&delays_path)?;
    let members: usize = population.households.iter().map(|h| h.size()).sum();
    Ok(json!({
        "households": population.households.len(),
        "members": members,
        "cells": population.cells.len(),
    }))
}

#[derive(Serialize)]
struct SimulationSummary {
    seed: u64,
    replicate: u64,
    params: SimParams,
    households: usize,
    years: u32,
    records: usize,
    claims: usize,
    events: usize,
    event_threshold: f64,
    mean_spend_per_person: f64,
    share_weeks_with_spending: f64,
    draw_checksum: String,
}

fn simulate(run: &mut Run<'_>, population: Population, params: SimParams, replicate: u64) -> Result<serde_json::Value> {
    let setup = SimulationSetup {
        population: &population,
        delays: &run.cfg.delays,
        years: run.cfg.years,
    };
    let mut sim = simulate_panel(&setup, &params, run.seed, replicate)?;
    let threshold = run.cfg.event_spec.resolve_threshold(&sim.records);
    let events = mark_index_events(&mut sim.records, &sim.claims, &EventSpec { threshold: Some(threshold) });

    write_panel_file(&sim.records, &run.output("panel.csv"))?;
    write_claims_file(&sim.claims, &run.output("claims.csv"))?;
    write_events_file(&events, &run.output("events.csv"))?;
    population.write_csv(&run.output("population.csv"))?;
    let delays_path = run.output("delays.csv");
    run.cfg.delays.write_csv(&delays_path)?;

    let spend: Vec<f64> = sim.records.iter().map(|r| r.spend_per_person).collect();
    let summary = SimulationSummary {
        seed: run.seed,
        replicate,
        params,
        households: population.households.len(),
        years: run.cfg.years,
        records: sim.records.len(),
        claims: sim.claims.len(),
        events: events.len(),
        event_threshold: threshold,
        mean_spend_per_person: mean(&spend),
        share_weeks_with_spending: spend.iter().filter(|&&s| s > 0.0).count() as f64 / spend.len().max(1) as f64,
        draw_checksum: format!("{:016x}", sim.draw_checksum),
    };
    run.write_json("summary.json", &summary)?;
    Ok(serde_json::to_value(&summary)?)
}

fn estimate_cmd(run: &mut Run<'_>, data: &ObservedData, delays: &BillDelayDistribution) -> Result<serde_json::Value> {
    let mut cfg = run.cfg.estimation.clone();
    cfg.seed = run.seed;
    run.manifest.option("model", format!("{:?}", cfg.model).to_lowercase());
    run.manifest.option("objective", &cfg.objective);
    let result = estimate(data, &cfg, delays)?;
    run.write_json("estimate.json", &result)?;
    result.write_profile_csv(&run.output("profile.csv"))?;
    Ok(json!({
        "model": result.model,
        "best_params": result.best_params,
        "ci_95": result.ci_95,
        "best_objective": result.best_objective,
        "warnings": result.warnings,
    }))
}

fn counterfactual(
    run: &mut Run<'_>,
    mode: &str,
    population: &Population,
    params: &SimParams,
    replicates: usize,
) -> Result<serde_json::Value> {
    let mode = counterfactual_by_name(mode)?;
    let setup = SimulationSetup {
        population,
        delays: &run.cfg.delays,
        years: run.cfg.years,
    };
    let cfg = CounterfactualConfig { replicates, seed: run.seed };
    let report = run_counterfactual(mode.as_ref(), &setup, params, &cfg)?;
    run.write_json("counterfactual.json", &report)?;
    report.write_households_file(&run.output("households.csv"))?;
    report.write_weekly_file(&run.output("weekly.csv"))?;
    Ok(json!({
        "mode": report.mode,
        "share_households_changed": report.share_households_changed,
        "share_reduced": report.share_reduced,
        "mean_delta": report.mean_delta,
        "median_delta": report.median_delta,
        "mean_pct_delta": report.mean_pct_delta,
        "median_pct_delta": report.median_pct_delta,
    }))
}
