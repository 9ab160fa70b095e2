//! Simulated-RMSE grid estimation of the signal parameters.
//!
//! Each observed household-week is predicted from the household's observed
//! claim history: at a candidate parameter value the household's perceived
//! position, expected marginal cost and spending are simulated for `R`
//! replicates of shocks and signal noise, and the objective compares the
//! prediction with observed spending. The default objective removes the
//! simulation variance of the replicate mean from the mean squared error;
//! median-over-replicates variants are also available (see
//! [`objective_registry`]).
//!
//! The search evaluates a coarse grid, then a finer grid around the coarse
//! argmin. Bootstrap intervals resample households and repeat the same
//! search on reweighted household terms.

mod context;
mod objective;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use context::{ContextOptions, EstimationContext, HouseholdFit, ObservedData};
pub use objective::{
    objective_by_name, objective_names, objective_registry, CorrectedRmse, MedianRmse, Objective, PanelMedianRmse,
    PointEval, DEFAULT_OBJECTIVE,
};

use crate::beliefs::LearningParams;
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey, DEFAULT_SEED};
use crate::simulator::{BillDelayDistribution, PanelRecord, SimParams};
use crate::stats::quantile;

/// Root mean squared difference in weekly household spending between two
/// panels aligned on `(household, year, week)`.
pub fn rmse(observed: &[PanelRecord], predicted: &[PanelRecord]) -> Result<f64> {
    if observed.len() != predicted.len() {
        return Err(Error::Alignment(format!(
            "observed has {} rows, predicted has {}",
            observed.len(),
            predicted.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::Alignment("panels are empty".into()));
    }
    let mut sse = 0.0;
    for (o, p) in observed.iter().zip(predicted) {
        if o.key() != p.key() {
            return Err(Error::Alignment(format!("row {:?} does not match {:?}", o.key(), p.key())));
        }
        sse += (o.household_spend() - p.household_spend()).powi(2);
    }
    Ok((sse / observed.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Fixed bias: `beta`, `sigma_s`.
    Static,
    /// Learned bias: `prior_mean`, `prior_sd`, `sigma_s`, `sigma_l`.
    Learning,
}

impl ModelKind {
    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Static => &["beta", "sigma_s"],
            ModelKind::Learning => &["prior_mean", "prior_sd", "sigma_s", "sigma_l"],
        }
    }

    /// Simulation parameters at a grid point (in `parameter_names` order).
    pub fn sim_params(self, point: &[f64]) -> SimParams {
        match self {
            ModelKind::Static => SimParams::static_model(point[0], point[1]),
            ModelKind::Learning => SimParams::learning_model(
                point[2],
                LearningParams {
                    prior_mean: point[0],
                    prior_var: point[1] * point[1],
                    signal_var: point[3] * point[3],
                },
            ),
        }
    }
}

/// One grid dimension. Values are `min, min + step, ...` up to `max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    /// Step of the refined grid around the coarse argmin, spanning one
    /// coarse step either side. `None` keeps the coarse argmin.
    pub refine_step: Option<f64>,
}

const GRID_EPS: f64 = 1e-9;

impl GridAxis {
    pub fn new(min: f64, max: f64, step: f64, refine_step: Option<f64>) -> Self {
        Self { min, max, step, refine_step }
    }

    pub fn fixed(value: f64) -> Self {
        Self::new(value, value, 1.0, None)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = self.min.is_finite()
            && self.max.is_finite()
            && self.min <= self.max
            && self.step > 0.0
            && self.refine_step.map_or(true, |r| r > 0.0 && r <= self.step);
        if ok {
            Ok(())
        } else {
            Err(Error::input(format!("invalid grid for {name}: {self:?}")))
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let n = ((self.max - self.min) / self.step + GRID_EPS).floor() as usize;
        (0..=n).map(|i| snap(self.min + i as f64 * self.step)).collect()
    }

    fn refined(&self, center: f64) -> Vec<f64> {
        match self.refine_step {
            None => vec![center],
            Some(r) => {
                let k = (self.step / r + GRID_EPS).floor() as i64;
                (-k..=k)
                    .map(|j| snap(center + j as f64 * r))
                    .filter(|v| *v >= self.min - GRID_EPS && *v <= self.max + GRID_EPS)
                    .collect()
            }
        }
    }

    fn is_degenerate(&self) -> bool {
        self.max - self.min < GRID_EPS
    }
}

/// Rounds away floating-point residue so grid values compare exactly.
fn snap(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Treatment of simulated shocks relative to observed spending.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockCap {
    #[default]
    Off,
    /// Simulated household shocks never exceed observed household spending
    /// in the same week.
    ClipToObserved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub model: ModelKind,
    /// One axis per parameter, in [`ModelKind::parameter_names`] order.
    pub grid: Vec<GridAxis>,
    pub n_replicates: usize,
    pub seed: u64,
    pub bootstrap_draws: usize,
    pub objective: String,
    #[serde(default)]
    pub shock_cap: ShockCap,
}

impl EstimationConfig {
    pub fn static_default() -> Self {
        Self {
            model: ModelKind::Static,
            grid: vec![
                GridAxis::new(0.5, 3.0, 0.05, Some(0.01)),
                GridAxis::new(0.0, 60.0, 5.0, Some(1.0)),
            ],
            n_replicates: 50,
            seed: DEFAULT_SEED,
            bootstrap_draws: 200,
            objective: DEFAULT_OBJECTIVE.to_string(),
            shock_cap: ShockCap::Off,
        }
    }

    pub fn learning_default() -> Self {
        Self {
            model: ModelKind::Learning,
            grid: vec![
                GridAxis::new(1.5, 3.5, 0.5, Some(0.25)),
                GridAxis::new(0.04, 0.20, 0.04, Some(0.02)),
                GridAxis::new(0.0, 60.0, 15.0, Some(7.5)),
                GridAxis::new(0.03, 0.15, 0.03, Some(0.015)),
            ],
            ..Self::static_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.model.parameter_names();
        if self.grid.len() != names.len() {
            return Err(Error::input(format!(
                "{:?} model needs {} grid axes ({names:?}), got {}",
                self.model,
                names.len(),
                self.grid.len()
            )));
        }
        for (axis, name) in self.grid.iter().zip(names) {
            axis.validate(name)?;
        }
        if self.n_replicates == 0 {
            return Err(Error::input("n_replicates must be at least 1"));
        }
        if self.bootstrap_draws == 1 {
            return Err(Error::input("bootstrap needs at least 2 draws (or 0 to skip)"));
        }
        objective_by_name(&self.objective)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub params: Vec<f64>,
    pub objective: f64,
    pub median_rmse: f64,
    pub sd_rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub model: ModelKind,
    pub objective: String,
    pub parameter_names: Vec<String>,
    pub best_params: BTreeMap<String, f64>,
    pub best_objective: f64,
    /// Every point evaluated on the full sample, sorted by parameters.
    pub objective_profile: Vec<ProfilePoint>,
    pub ci_95: BTreeMap<String, Interval>,
    pub bootstrap_estimates: Vec<Vec<f64>>,
    pub replicate_count: usize,
    pub households: usize,
    pub observations: usize,
    pub warnings: Vec<String>,
}

impl EstimationResult {
    pub fn best_point(&self) -> Vec<f64> {
        self.parameter_names.iter().map(|n| self.best_params[n]).collect()
    }

    pub fn sim_params(&self) -> SimParams {
        self.model.sim_params(&self.best_point())
    }

    /// Profile CSV: parameter columns, objective, median_rmse, sd_rmse.
    pub fn write_profile_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.parameter_names.iter().map(String::as_str).collect();
        header.extend(["objective", "median_rmse", "sd_rmse"]);
        w.write_record(&header)?;
        for p in &self.objective_profile {
            let mut row: Vec<String> = p.params.iter().map(|v| v.to_string()).collect();
            row.extend([p.objective.to_string(), p.median_rmse.to_string(), p.sd_rmse.to_string()]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of one grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// `(point, value)` for every point visited, coarse then refined.
    pub visited: Vec<(Vec<f64>, f64)>,
    pub warnings: Vec<String>,
}

type PointKey = Vec<i64>;

fn key(point: &[f64]) -> PointKey {
    point.iter().map(|v| (v * 1e9).round() as i64).collect()
}

/// Evaluates an objective at grid points, caching household terms so
/// reweighted searches reuse earlier simulations.
pub struct Estimator<'a> {
    ctx: &'a EstimationContext,
    model: ModelKind,
    objective: Box<dyn Objective>,
    cache: RwLock<BTreeMap<PointKey, Arc<PointEval>>>,
}

impl<'a> Estimator<'a> {
    pub fn new(ctx: &'a EstimationContext, model: ModelKind, objective: Box<dyn Objective>) -> Result<Self> {
        if model == ModelKind::Learning && !ctx.has_learning_draws() {
            return Err(Error::input("learning model needs a context built with learning draws"));
        }
        Ok(Self {
            ctx,
            model,
            objective,
            cache: RwLock::new(BTreeMap::new()),
        })
    }

    pub fn objective_name(&self) -> &'static str {
        self.objective.name()
    }

    pub fn evaluated_points(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    /// Household terms at `point`, simulating on first use.
    pub fn eval(&self, point: &[f64]) -> Result<Arc<PointEval>> {
        let k = key(point);
        if let Some(e) = self.cache.read().unwrap().get(&k) {
            return Ok(e.clone());
        }
        let e = Arc::new(self.objective.evaluate(self.ctx, &self.model.sim_params(point))?);
        self.cache.write().unwrap().insert(k, e.clone());
        Ok(e)
    }

    /// Objective at `point` on the full sample.
    pub fn objective_at(&self, point: &[f64]) -> Result<f64> {
        Ok(self.objective.value(&*self.eval(point)?, None))
    }

    fn best_of(&self, points: &[Vec<f64>], weights: Option<&[f64]>, visited: &mut Vec<(Vec<f64>, f64)>) -> Result<(Vec<f64>, f64)> {
        let mut best: Option<(Vec<f64>, f64)> = None;
        for p in points {
            let v = self.objective.value(&*self.eval(p)?, weights);
            visited.push((p.clone(), v));
            let better = match &best {
                None => true,
                // Lower objective wins; exact ties go to the lexicographically
                // smaller point, i.e. toward smaller beta first.
                Some((bp, bv)) => v < *bv || (v == *bv && lexi_less(p, bp)),
            };
            if better {
                best = Some((p.clone(), v));
            }
        }
        best.ok_or_else(|| Error::input("grid has no points"))
    }

    /// Coarse grid, then refinement around the coarse argmin.
    pub fn search(&self, grid: &[GridAxis], weights: Option<&[f64]>) -> Result<SearchOutcome> {
        let mut visited = Vec::new();
        let coarse = cartesian(&grid.iter().map(GridAxis::values).collect::<Vec<_>>());
        let (coarse_best, _) = self.best_of(&coarse, weights, &mut visited)?;
        let fine_axes: Vec<Vec<f64>> = grid.iter().zip(&coarse_best).map(|(a, c)| a.refined(*c)).collect();
        let fine = cartesian(&fine_axes);
        let (best, best_value) = self.best_of(&fine, weights, &mut visited)?;

        let names = self.model.parameter_names();
        let warnings = grid
            .iter()
            .zip(&best)
            .zip(names)
            .filter(|((axis, v), _)| {
                !axis.is_degenerate() && ((**v - axis.min).abs() < GRID_EPS || (**v - axis.max).abs() < GRID_EPS)
            })
            .map(|((axis, v), name)| {
                format!("{name} argmin {v} lies on the grid boundary [{}, {}]", axis.min, axis.max)
            })
            .collect();
        Ok(SearchOutcome {
            best,
            best_value,
            visited,
            warnings,
        })
    }
}

fn lexi_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return x < y;
        }
    }
    false
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, values| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect()
    })
}

/// Household weights for bootstrap draw `b`: counts of each household in a
/// resample of the same size, with replacement.
pub fn bootstrap_weights(households: usize, seed: u64, draw: usize) -> Vec<f64> {
    let mut rng = StreamKey::new(seed, Purpose::Bootstrap).rng(draw as u64);
    let mut w = vec![0.0; households];
    for _ in 0..households {
        w[rng.gen_range(0..households)] += 1.0;
    }
    w
}

/// Full-sample grid search.
pub fn grid_search(estimator: &Estimator<'_>, cfg: &EstimationConfig) -> Result<SearchOutcome> {
    estimator.search(&cfg.grid, None)
}

/// Percentile intervals from grid searches on the given household weights.
pub fn bootstrap_ci(
    estimator: &Estimator<'_>,
    cfg: &EstimationConfig,
    weights: &[Vec<f64>],
) -> Result<(Vec<Interval>, Vec<Vec<f64>>)> {
    if weights.len() < 2 {
        return Err(Error::input("bootstrap needs at least 2 draws"));
    }
    let estimates: Vec<Vec<f64>> = weights
        .iter()
        .map(|w| estimator.search(&cfg.grid, Some(w)).map(|o| o.best))
        .collect::<Result<_>>()?;
    let intervals = (0..cfg.grid.len())
        .map(|j| {
            let v: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
            Interval {
                lower: quantile(&v, 0.025),
                upper: quantile(&v, 0.975),
            }
        })
        .collect();
    Ok((intervals, estimates))
}

/// Grid search plus bootstrap on an observed panel.
pub fn estimate(data: &ObservedData, cfg: &EstimationConfig, delays: &BillDelayDistribution) -> Result<EstimationResult> {
    cfg.validate()?;
    let ctx = EstimationContext::new(
        data,
        &ContextOptions {
            replicates: cfg.n_replicates,
            seed: cfg.seed,
            delays: delays.clone(),
            learning: cfg.model == ModelKind::Learning,
            shock_cap: cfg.shock_cap,
        },
    )?;
    estimate_with_context(&ctx, cfg)
}

pub fn estimate_with_context(ctx: &EstimationContext, cfg: &EstimationConfig) -> Result<EstimationResult> {
    cfg.validate()?;
    let estimator = Estimator::new(ctx, cfg.model, objective_by_name(&cfg.objective)?)?;
    let outcome = grid_search(&estimator, cfg)?;
    for w in &outcome.warnings {
        warn!("{w}");
    }

    let mut profile: BTreeMap<PointKey, ProfilePoint> = BTreeMap::new();
    for (p, v) in &outcome.visited {
        let e = estimator.eval(p)?;
        profile.entry(key(p)).or_insert_with(|| ProfilePoint {
            params: p.clone(),
            objective: *v,
            median_rmse: e.median_rmse,
            sd_rmse: e.sd_rmse,
        });
    }

    let names: Vec<String> = cfg.model.parameter_names().iter().map(|s| s.to_string()).collect();
    let (ci_95, bootstrap_estimates) = if cfg.bootstrap_draws >= 2 {
        let weights: Vec<Vec<f64>> = (0..cfg.bootstrap_draws)
            .map(|b| bootstrap_weights(ctx.household_count(), cfg.seed, b))
            .collect();
        let (intervals, estimates) = bootstrap_ci(&estimator, cfg, &weights)?;
        (names.iter().cloned().zip(intervals).collect(), estimates)
    } else {
        (BTreeMap::new(), Vec::new())
    };

    Ok(EstimationResult {
        model: cfg.model,
        objective: cfg.objective.clone(),
        best_params: names.iter().cloned().zip(outcome.best.iter().copied()).collect(),
        parameter_names: names,
        best_objective: outcome.best_value,
        objective_profile: profile.into_values().collect(),
        ci_95,
        bootstrap_estimates,
        replicate_count: cfg.n_replicates,
        households: ctx.household_count(),
        observations: ctx.observation_count(),
        warnings: outcome.warnings,
    })
}
