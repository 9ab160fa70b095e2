//! Counterfactual information regimes.
//!
//! A counterfactual re-simulates every household with the same random draws
//! as the baseline (same seed, replicate, year and household streams) under
//! modified information parameters, and reports how spending changes. Deltas
//! are `baseline - counterfactual` per household-year, averaged over
//! replicates; percentages are relative to counterfactual spending.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beliefs::LearningParams;
use crate::error::{Error, Result};
use crate::rng::Checksum;
use crate::simulator::{simulate_household, Household, SimParams, SimulationSetup};
use crate::stats;

/// Deltas smaller than this (in dollars) count as unchanged.
pub const CHANGE_TOLERANCE: f64 = 1e-6;

pub const DEFAULT_COUNTERFACTUAL_REPLICATES: usize = 50;

/// An alternative information regime derived from fitted parameters.
pub trait Counterfactual: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Parameters of the counterfactual world.
    fn regime(&self, baseline: &SimParams) -> Result<SimParams>;
}

/// Signals centred on the truth: `beta = 1`, noise and delays unchanged.
pub struct Recenter;

/// No information friction: exact signals and bills in the week of service.
pub struct FullInformation;

/// Learning model with an exact, unbiased prior (`prior_mean = 1`, `prior_var = 0`).
pub struct UnbiasedPrior;

impl Counterfactual for Recenter {
    fn name(&self) -> &'static str {
        "recenter"
    }

    fn description(&self) -> &'static str {
        "impose beta = 1 for all households"
    }

    fn regime(&self, baseline: &SimParams) -> Result<SimParams> {
        if baseline.learning.is_some() {
            return Err(Error::input("`recenter` applies to the static model; use `learning` for learning-model parameters"));
        }
        let mut p = *baseline;
        p.signal.beta = 1.0;
        Ok(p)
    }
}

impl Counterfactual for FullInformation {
    fn name(&self) -> &'static str {
        "fullinfo"
    }

    fn description(&self) -> &'static str {
        "exact signals (beta = 1, sigma_s = 0) and immediate bills"
    }

    fn regime(&self, baseline: &SimParams) -> Result<SimParams> {
        let mut p = SimParams::static_model(1.0, 0.0);
        p.instant_bills = true;
        // Keep a degenerate baseline bit-identical so the regime is a fixed point.
        if baseline.learning.is_none() && baseline.signal == p.signal && baseline.instant_bills {
            return Ok(*baseline);
        }
        Ok(p)
    }
}

impl Counterfactual for UnbiasedPrior {
    fn name(&self) -> &'static str {
        "learning"
    }

    fn description(&self) -> &'static str {
        "learning model with prior mean 1 and zero prior variance"
    }

    fn regime(&self, baseline: &SimParams) -> Result<SimParams> {
        let lp = baseline
            .learning
            .ok_or_else(|| Error::input("`learning` counterfactual needs learning-model parameters (prior_mean, prior_var, signal_var)"))?;
        Ok(SimParams::learning_model(
            baseline.signal.sigma_s,
            LearningParams {
                prior_mean: 1.0,
                prior_var: 0.0,
                ..lp
            },
        ))
    }
}

pub fn counterfactual_registry() -> Vec<Box<dyn Counterfactual>> {
    vec![Box::new(Recenter), Box::new(FullInformation), Box::new(UnbiasedPrior)]
}

pub fn counterfactual_names() -> Vec<&'static str> {
    counterfactual_registry().iter().map(|c| c.name()).collect()
}

pub fn counterfactual_by_name(name: &str) -> Result<Box<dyn Counterfactual>> {
    counterfactual_registry()
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| Error::input(format!("unknown counterfactual mode `{name}` (expected one of {:?})", counterfactual_names())))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualConfig {
    pub replicates: usize,
    pub seed: u64,
}

impl CounterfactualConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            replicates: DEFAULT_COUNTERFACTUAL_REPLICATES,
            seed,
        }
    }
}

/// Spending of one household-year, averaged over replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HouseholdDelta {
    pub household_id: u64,
    pub year: u32,
    pub baseline_spend: f64,
    pub counterfactual_spend: f64,
    /// `baseline_spend - counterfactual_spend`.
    pub delta: f64,
    /// Percent of counterfactual spending; absent when that is zero.
    pub pct_delta: Option<f64>,
    /// Mean baseline annual OOP is below the deductible.
    pub deductible_unmet: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeeklyDelta {
    pub week: u32,
    /// Mean household spending in this week of the year.
    pub baseline_mean: f64,
    pub counterfactual_mean: f64,
    pub delta: f64,
    pub pct_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub mode: String,
    pub baseline_params: SimParams,
    pub counterfactual_params: SimParams,
    pub seed: u64,
    pub replicates: usize,
    pub household_years: usize,
    pub share_households_changed: f64,
    /// Share of household-years whose counterfactual spending is lower.
    pub share_reduced: f64,
    pub mean_delta: f64,
    pub median_delta: f64,
    pub mean_pct_delta: Option<f64>,
    pub median_pct_delta: Option<f64>,
    /// Household-years left out of the percent statistics.
    pub zero_counterfactual: usize,
    /// Mean annual spending per household-year.
    pub baseline_mean_spend: f64,
    pub counterfactual_mean_spend: f64,
    pub aggregate_pct_delta: Option<f64>,
    pub share_deductible_unmet: f64,
    /// Share reduced among household-years with an unmet deductible.
    pub share_reduced_unmet: Option<f64>,
    pub baseline_checksum: u64,
    pub counterfactual_checksum: u64,
    pub weekly: Vec<WeeklyDelta>,
    #[serde(skip)]
    pub households: Vec<HouseholdDelta>,
}

fn pct(delta: f64, reference: f64) -> Option<f64> {
    (reference > 0.0).then(|| 100.0 * delta / reference)
}

struct HouseholdRun {
    deltas: Vec<HouseholdDelta>,
    weekly_base: Vec<f64>,
    weekly_cf: Vec<f64>,
    base_sum: Checksum,
    cf_sum: Checksum,
}

fn run_household(
    setup: &SimulationSetup<'_>,
    h: &Household,
    baseline: &SimParams,
    cf: &SimParams,
    cfg: &CounterfactualConfig,
) -> Result<HouseholdRun> {
    let weeks = h.contract.plan_year_weeks as usize;
    let years = setup.years as usize;
    let mut annual_base = vec![0.0; years];
    let mut annual_cf = vec![0.0; years];
    let mut annual_oop = vec![0.0; years];
    let mut run = HouseholdRun {
        deltas: Vec::with_capacity(years),
        weekly_base: vec![0.0; weeks],
        weekly_cf: vec![0.0; weeks],
        base_sum: Checksum::default(),
        cf_sum: Checksum::default(),
    };
    for r in 0..cfg.replicates as u64 {
        let b = simulate_household(setup, h, baseline, cfg.seed, r)?;
        let c = simulate_household(setup, h, cf, cfg.seed, r)?;
        run.base_sum.add(b.draw_checksum);
        run.cf_sum.add(c.draw_checksum);
        for (rb, rc) in b.records.iter().zip(&c.records) {
            let y = rb.year as usize - 1;
            let w = rb.week as usize - 1;
            annual_base[y] += rb.household_spend();
            annual_cf[y] += rc.household_spend();
            annual_oop[y] += rb.true_oop_week;
            run.weekly_base[w] += rb.household_spend();
            run.weekly_cf[w] += rc.household_spend();
        }
    }
    let reps = cfg.replicates as f64;
    for y in 0..years {
        let (base, cf) = (annual_base[y] / reps, annual_cf[y] / reps);
        let delta = base - cf;
        run.deltas.push(HouseholdDelta {
            household_id: h.id,
            year: y as u32 + 1,
            baseline_spend: base,
            counterfactual_spend: cf,
            delta,
            pct_delta: pct(delta, cf),
            deductible_unmet: annual_oop[y] / reps < h.contract.deductible,
        });
    }
    Ok(run)
}

fn share(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Runs `mode` against the baseline parameters on every household.
pub fn run_counterfactual(
    mode: &dyn Counterfactual,
    setup: &SimulationSetup<'_>,
    baseline: &SimParams,
    cfg: &CounterfactualConfig,
) -> Result<CounterfactualReport> {
    baseline.validate()?;
    if cfg.replicates == 0 {
        return Err(Error::input("counterfactual replicates must be at least 1"));
    }
    let cf = mode.regime(baseline)?;
    cf.validate()?;
    let runs: Vec<HouseholdRun> = setup
        .population
        .households
        .par_iter()
        .map(|h| run_household(setup, h, baseline, &cf, cfg))
        .collect::<Result<_>>()?;

    let weeks = runs.iter().map(|r| r.weekly_base.len()).max().unwrap_or(0);
    let mut weekly_base = vec![0.0; weeks];
    let mut weekly_cf = vec![0.0; weeks];
    let mut base_sum = Checksum::default();
    let mut cf_sum = Checksum::default();
    let mut households = Vec::new();
    for r in runs {
        for (w, (b, c)) in r.weekly_base.iter().zip(&r.weekly_cf).enumerate() {
            weekly_base[w] += b;
            weekly_cf[w] += c;
        }
        base_sum.add(r.base_sum.0);
        cf_sum.add(r.cf_sum.0);
        households.extend(r.deltas);
    }

    let n = households.len();
    let per_week = (n * cfg.replicates) as f64;
    let weekly = (0..weeks)
        .map(|w| {
            let (b, c) = (weekly_base[w] / per_week, weekly_cf[w] / per_week);
            WeeklyDelta {
                week: w as u32 + 1,
                baseline_mean: b,
                counterfactual_mean: c,
                delta: b - c,
                pct_delta: pct(b - c, c),
            }
        })
        .collect();

    let deltas: Vec<f64> = households.iter().map(|h| h.delta).collect();
    let pcts: Vec<f64> = households.iter().filter_map(|h| h.pct_delta).collect();
    let reduced = |h: &HouseholdDelta| h.delta > CHANGE_TOLERANCE;
    let unmet: Vec<&HouseholdDelta> = households.iter().filter(|h| h.deductible_unmet).collect();
    let base_mean = stats::mean(&households.iter().map(|h| h.baseline_spend).collect::<Vec<_>>());
    let cf_mean = stats::mean(&households.iter().map(|h| h.counterfactual_spend).collect::<Vec<_>>());

    Ok(CounterfactualReport {
        mode: mode.name().to_string(),
        baseline_params: *baseline,
        counterfactual_params: cf,
        seed: cfg.seed,
        replicates: cfg.replicates,
        household_years: n,
        share_households_changed: share(deltas.iter().filter(|d| d.abs() > CHANGE_TOLERANCE).count(), n),
        share_reduced: share(households.iter().filter(|h| reduced(h)).count(), n),
        mean_delta: stats::mean(&deltas),
        median_delta: stats::median(&deltas),
        mean_pct_delta: (!pcts.is_empty()).then(|| stats::mean(&pcts)),
        median_pct_delta: (!pcts.is_empty()).then(|| stats::median(&pcts)),
        zero_counterfactual: n - pcts.len(),
        baseline_mean_spend: base_mean,
        counterfactual_mean_spend: cf_mean,
        aggregate_pct_delta: pct(base_mean - cf_mean, cf_mean),
        share_deductible_unmet: share(unmet.len(), n),
        share_reduced_unmet: (!unmet.is_empty()).then(|| share(unmet.iter().filter(|h| reduced(h)).count(), unmet.len())),
        baseline_checksum: base_sum.0,
        counterfactual_checksum: cf_sum.0,
        weekly,
        households,
    })
}

pub const HOUSEHOLD_DELTA_COLUMNS: [&str; 7] = [
    "household_id",
    "year",
    "baseline_spend",
    "counterfactual_spend",
    "delta",
    "pct_delta",
    "deductible_unmet",
];

fn fmt_pct(p: Option<f64>) -> String {
    p.map_or_else(String::new, |v| format!("{v:.4}"))
}

impl CounterfactualReport {
    pub fn write_households<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HOUSEHOLD_DELTA_COLUMNS)?;
        for h in &self.households {
            w.write_record([
                h.household_id.to_string(),
                h.year.to_string(),
                format!("{:.2}", h.baseline_spend),
                format!("{:.2}", h.counterfactual_spend),
                format!("{:.2}", h.delta),
                fmt_pct(h.pct_delta),
                u8::from(h.deductible_unmet).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_weekly<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["week", "baseline_mean", "counterfactual_mean", "delta", "pct_delta"])?;
        for d in &self.weekly {
            w.write_record([
                d.week.to_string(),
                format!("{:.2}", d.baseline_mean),
                format!("{:.2}", d.counterfactual_mean),
                format!("{:.2}", d.delta),
                fmt_pct(d.pct_delta),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_households_file(&self, path: &Path) -> Result<()> {
        self.write_households(std::fs::File::create(path)?)
    }

    pub fn write_weekly_file(&self, path: &Path) -> Result<()> {
        self.write_weekly(std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::CostSharingContract;
    use crate::simulator::{BillDelayDistribution, Population};
    use crate::testutil;

    fn run(mode: &str, pop: &Population, delays: &BillDelayDistribution, params: &SimParams, reps: usize) -> CounterfactualReport {
        let setup = SimulationSetup { population: pop, delays, years: 1 };
        let cfg = CounterfactualConfig { replicates: reps, seed: 11 };
        run_counterfactual(counterfactual_by_name(mode).unwrap().as_ref(), &setup, params, &cfg).unwrap()
    }

    fn assert_no_change(r: &CounterfactualReport) {
        assert_eq!(r.share_households_changed, 0.0, "{}", r.mode);
        assert!(r.households.iter().all(|h| h.delta == 0.0));
        assert_eq!(r.mean_delta, 0.0);
    }

    fn learning(prior_mean: f64, prior_var: f64) -> SimParams {
        SimParams::learning_model(
            15.2,
            LearningParams {
                prior_mean,
                prior_var,
                signal_var: 0.09 * 0.09,
            },
        )
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(counterfactual_names(), ["recenter", "fullinfo", "learning"]);
        assert!(counterfactual_by_name("nope").is_err());
        assert!(Recenter.regime(&learning(2.0, 0.1)).is_err());
        assert!(UnbiasedPrior.regime(&SimParams::static_model(1.7, 1.0)).is_err());
        let full = FullInformation.regime(&SimParams::static_model(1.7, 9.0)).unwrap();
        assert_eq!((full.signal.beta, full.signal.sigma_s, full.instant_bills), (1.0, 0.0, true));
    }

    #[test]
    fn unbiased_baselines_are_fixed_points() {
        let (pop, delays) = testutil::population(30, 3);
        assert_no_change(&run("recenter", &pop, &delays, &SimParams::static_model(1.0, 15.2), 3));
        assert_no_change(&run("learning", &pop, &delays, &learning(1.0, 0.0), 3));
        let mut frictionless = SimParams::static_model(1.0, 0.0);
        frictionless.instant_bills = true;
        assert_no_change(&run("fullinfo", &pop, &delays, &frictionless, 3));
    }

    #[test]
    fn zero_deductible_population_is_unaffected() {
        let (mut pop, delays) = testutil::population(30, 4);
        for h in &mut pop.households {
            h.contract = CostSharingContract::new(0.0, 0.2, 3000.0).unwrap();
        }
        let params = SimParams::static_model(1.73, 15.2);
        assert_no_change(&run("recenter", &pop, &delays, &params, 2));
        assert_no_change(&run("fullinfo", &pop, &delays, &params, 2));
    }

    #[test]
    fn streams_are_shared() {
        let (pop, delays) = testutil::population(25, 5);
        let r = run("recenter", &pop, &delays, &SimParams::static_model(1.73, 15.2), 4);
        assert_eq!(r.baseline_checksum, r.counterfactual_checksum);
        assert!(r.share_households_changed > 0.0);
        assert!((0.0..=1.0).contains(&r.share_reduced));
    }

    #[test]
    fn overestimated_bias_raises_spending() {
        let (pop, delays) = testutil::population(60, 6);
        let r = run("recenter", &pop, &delays, &SimParams::static_model(1.73, 15.2), 10);
        assert!(r.mean_delta > 0.0);
        assert!(r.share_reduced > 0.5);
    }

    #[test]
    fn percent_statistics_skip_zero_counterfactuals() {
        let (pop, delays) = testutil::population(40, 7);
        let r = run("recenter", &pop, &delays, &SimParams::static_model(1.73, 15.2), 1);
        let zeros = r.households.iter().filter(|h| h.counterfactual_spend == 0.0).count();
        assert_eq!(r.zero_counterfactual, zeros);
        for h in &r.households {
            match h.pct_delta {
                Some(p) => assert!((p - 100.0 * h.delta / h.counterfactual_spend).abs() < 1e-9),
                None => assert_eq!(h.counterfactual_spend, 0.0),
            }
        }
    }

    #[test]
    fn csv_output() {
        let (pop, delays) = testutil::population(5, 8);
        let r = run("fullinfo", &pop, &delays, &SimParams::static_model(1.73, 15.2), 2);
        let mut buf = Vec::new();
        r.write_households(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), HOUSEHOLD_DELTA_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 6);
        let mut buf = Vec::new();
        r.write_weekly(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 53);
    }
}
