//! Estimation objectives, selectable by name.

use rayon::prelude::*;

use super::context::{EstimationContext, HouseholdFit};
use crate::error::{Error, Result};
use crate::simulator::{simulate_household, SimParams, SimulationSetup};
use crate::stats;

/// Objective evaluated at one parameter value.
///
/// `terms` holds `width` numbers per household so the objective can be
/// recomputed under household reweighting (bootstrap) without re-simulating.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEval {
    pub terms: Vec<f64>,
    pub width: usize,
    /// Median and standard deviation over replicates of the per-replicate RMSE.
    pub median_rmse: f64,
    pub sd_rmse: f64,
}

impl PointEval {
    fn household(&self, h: usize) -> &[f64] {
        &self.terms[h * self.width..(h + 1) * self.width]
    }

    pub fn households(&self) -> usize {
        self.terms.len() / self.width
    }
}

pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;

    fn evaluate(&self, ctx: &EstimationContext, params: &SimParams) -> Result<PointEval>;

    /// Objective value, optionally with household weights.
    fn value(&self, eval: &PointEval, weights: Option<&[f64]>) -> f64;
}

pub const DEFAULT_OBJECTIVE: &str = "corrected_rmse";

pub fn objective_registry() -> Vec<Box<dyn Objective>> {
    vec![Box::new(CorrectedRmse), Box::new(MedianRmse), Box::new(PanelMedianRmse)]
}

pub fn objective_names() -> Vec<&'static str> {
    objective_registry().iter().map(|o| o.name()).collect()
}

pub fn objective_by_name(name: &str) -> Result<Box<dyn Objective>> {
    objective_registry()
        .into_iter()
        .find(|o| o.name() == name)
        .ok_or_else(|| Error::input(format!("unknown objective `{name}` (expected one of {:?})", objective_names())))
}

/// RMSE of the replicate-mean prediction, with the simulation variance of
/// the mean removed: `sqrt(mean((y - m_bar)^2 - s^2 / R))`.
pub struct CorrectedRmse;

/// Median over replicates of the RMSE of each replicate's prediction.
pub struct MedianRmse;

/// Median over replicates of the RMSE between the observed panel and an
/// independently re-simulated panel.
pub struct PanelMedianRmse;

fn summary(fits: &[HouseholdFit], replicates: usize) -> (f64, f64) {
    let weeks: usize = fits.iter().map(|f| f.weeks).sum();
    let rmse: Vec<f64> = (0..replicates)
        .map(|r| (fits.iter().map(|f| f.replicate_sse[r]).sum::<f64>() / weeks as f64).sqrt())
        .collect();
    (stats::median(&rmse), stats::sd(&rmse))
}

fn replicate_terms(fits: &[HouseholdFit], replicates: usize) -> PointEval {
    let width = replicates + 1;
    let mut terms = Vec::with_capacity(fits.len() * width);
    for f in fits {
        terms.push(f.weeks as f64);
        terms.extend_from_slice(&f.replicate_sse);
    }
    let (median_rmse, sd_rmse) = summary(fits, replicates);
    PointEval {
        terms,
        width,
        median_rmse,
        sd_rmse,
    }
}

fn weighted_sum(eval: &PointEval, weights: Option<&[f64]>, col: usize) -> f64 {
    (0..eval.households())
        .map(|h| weights.map_or(1.0, |w| w[h]) * eval.household(h)[col])
        .sum()
}

fn median_of_replicates(eval: &PointEval, weights: Option<&[f64]>) -> f64 {
    let weeks = weighted_sum(eval, weights, 0);
    let rmse: Vec<f64> = (1..eval.width)
        .map(|c| (weighted_sum(eval, weights, c) / weeks).sqrt())
        .collect();
    stats::median(&rmse)
}

impl Objective for CorrectedRmse {
    fn name(&self) -> &'static str {
        "corrected_rmse"
    }

    fn evaluate(&self, ctx: &EstimationContext, params: &SimParams) -> Result<PointEval> {
        let fits = ctx.household_fits(params);
        let (median_rmse, sd_rmse) = summary(&fits, ctx.replicates());
        Ok(PointEval {
            terms: fits.iter().flat_map(|f| [f.weeks as f64, f.corrected_sse]).collect(),
            width: 2,
            median_rmse,
            sd_rmse,
        })
    }

    fn value(&self, eval: &PointEval, weights: Option<&[f64]>) -> f64 {
        (weighted_sum(eval, weights, 1) / weighted_sum(eval, weights, 0)).max(0.0).sqrt()
    }
}

impl Objective for MedianRmse {
    fn name(&self) -> &'static str {
        "median_rmse"
    }

    fn evaluate(&self, ctx: &EstimationContext, params: &SimParams) -> Result<PointEval> {
        Ok(replicate_terms(&ctx.household_fits(params), ctx.replicates()))
    }

    fn value(&self, eval: &PointEval, weights: Option<&[f64]>) -> f64 {
        median_of_replicates(eval, weights)
    }
}

impl Objective for PanelMedianRmse {
    fn name(&self) -> &'static str {
        "panel_median_rmse"
    }

    fn evaluate(&self, ctx: &EstimationContext, params: &SimParams) -> Result<PointEval> {
        params.validate()?;
        let r_count = ctx.replicates();
        let fits = ctx
            .households
            .par_iter()
            .map(|&h| {
                let hh = &ctx.population.households[h];
                let units: Vec<_> = ctx.units.iter().filter(|u| u.household == h).collect();
                let years = units.iter().map(|u| u.year).max().unwrap_or(1);
                let setup = SimulationSetup {
                    population: &ctx.population,
                    delays: &ctx.delays,
                    years,
                };
                let mut fit = HouseholdFit {
                    weeks: units.iter().map(|u| u.weeks).sum(),
                    corrected_sse: 0.0,
                    replicate_sse: vec![0.0; r_count],
                };
                for r in 0..r_count {
                    let sim = simulate_household(&setup, hh, params, ctx.seed(), r as u64)?;
                    for u in &units {
                        let offset = (u.year - 1) as usize * u.weeks;
                        for w in 0..u.weeks {
                            let e = ctx.y[u.start + w] - sim.records[offset + w].household_spend();
                            fit.replicate_sse[r] += e * e;
                        }
                    }
                }
                Ok(fit)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(replicate_terms(&fits, r_count))
    }

    fn value(&self, eval: &PointEval, weights: Option<&[f64]>) -> f64 {
        median_of_replicates(eval, weights)
    }
}
