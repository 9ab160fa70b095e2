//! Run configuration: a flat key-value file with section headers.
//!
//! ```toml
//! [contract]
//! deductible = 1000
//! coinsurance = 0.2
//!
//! [signal]
//! beta = 1.73
//! sigma_s = 15.2
//! ```
//!
//! Every key is optional and listed in [`KEYS`]. Relative paths are resolved
//! against the directory of the config file. Errors carry `file:line` anchors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use toml::Value;

use crate::beliefs::{LearningParams, SignalParams};
use crate::contract::{CostSharingContract, DEFAULT_PLAN_YEAR_WEEKS};
use crate::counterfactuals::DEFAULT_COUNTERFACTUAL_REPLICATES;
use crate::error::{Error, Result};
use crate::estimation::{objective_names, EstimationConfig, GridAxis, ModelKind, ShockCap};
use crate::econometrics::DEFAULT_EVENT_WINDOW;
use crate::shocks::{default_cells, read_cell_table, CellMoments, DEFAULT_BASE_MOMENTS};
use crate::simulator::delay::{DEFAULT_MAX_DELAY, DEFAULT_SHARE_WITHIN_FOUR_WEEKS};
use crate::simulator::population::{default_omega_log_mean, DEFAULT_OMEGA_LOG_SD};
use crate::simulator::{BillDelayDistribution, EventSpec, PopulationConfig, SimParams};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Float { min: f64, max: f64 },
    Int { min: i64, max: i64 },
    Bool,
    Choice(&'static [&'static str]),
    Objective,
    Path,
    /// `[min, max, step]`, `[min, max, step, refine_step]` or a single value.
    Grid,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Float { min, max } => write!(f, "number in [{min}, {max}]"),
            Kind::Int { min, max } => write!(f, "integer in [{min}, {max}]"),
            Kind::Bool => write!(f, "true or false"),
            Kind::Choice(c) => write!(f, "one of {}", c.join(", ")),
            Kind::Objective => write!(f, "one of {}", objective_names().join(", ")),
            Kind::Path => write!(f, "file path"),
            Kind::Grid => write!(f, "[min, max, step] or [min, max, step, refine_step]"),
        }
    }
}

/// One documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeyInfo {
    pub section: &'static str,
    pub key: &'static str,
    kind: Kind,
    pub doc: &'static str,
}

impl KeyInfo {
    pub fn expects(&self) -> String {
        self.kind.to_string()
    }
}

const INF: f64 = f64::INFINITY;
const BIG: i64 = 1 << 40;

const fn key(section: &'static str, key: &'static str, kind: Kind, doc: &'static str) -> KeyInfo {
    KeyInfo { section, key, kind, doc }
}

const fn float(min: f64, max: f64) -> Kind {
    Kind::Float { min, max }
}

const fn int(min: i64, max: i64) -> Kind {
    Kind::Int { min, max }
}

pub const KEYS: &[KeyInfo] = &[
    key("run", "seed", int(0, i64::MAX), "master seed; --seed overrides"),
    key("contract", "deductible", float(0.0, INF), "annual family deductible in OOP dollars (1000)"),
    key("contract", "coinsurance", float(0.0, 1.0), "share paid between deductible and OOP max (0.2)"),
    key("contract", "oop_max", float(0.0, INF), "annual out-of-pocket maximum (3000)"),
    key("contract", "weeks", int(1, 520), "weeks per plan year (52)"),
    key("population", "households", int(1, BIG), "number of households (2000)"),
    key("population", "mean_household_size", float(1.0, 50.0), "mean members per household (2.5)"),
    key("population", "max_household_size", int(1, 50), "largest household (5)"),
    key("population", "cell_table", Kind::Path, "CSV with cell_id, mean, median, sd; default 32 synthetic cells"),
    key("population", "base_mean", float(-INF, INF), "weekly per-person shock mean of the default cells (25)"),
    key("population", "base_median", float(-INF, INF), "weekly per-person shock median of the default cells (-10)"),
    key("population", "base_sd", float(0.0, INF), "weekly per-person shock sd of the default cells (50)"),
    key("population", "omega_log_mean", float(-INF, INF), "mean of log omega (ln 300)"),
    key("population", "omega_log_sd", float(0.0, INF), "sd of log omega (0.5)"),
    key("signal", "beta", float(0.0, 1e3), "signal bias: signals centre on beta times true OOP (1.73)"),
    key("signal", "sigma_s", float(0.0, INF), "signal noise sd in dollars (15.2)"),
    key("learning", "enabled", Kind::Bool, "simulate the learning model instead of a fixed beta (false)"),
    key("learning", "prior_mean", float(-1e3, 1e3), "prior mean of beta (2.58)"),
    key("learning", "prior_var", float(0.0, INF), "prior variance of beta (0.0144)"),
    key("learning", "learning_signal_var", float(0.0, INF), "variance of the learning signal per bill (0.0081)"),
    key("simulation", "years", int(1, 100), "plan years per household (1)"),
    key("simulation", "event_threshold", float(0.0, INF), "household spending that makes a week an index event; default p75"),
    key("simulation", "delay_pmf", Kind::Path, "CSV bill-delay pmf (weeks, probability)"),
    key("simulation", "delay_share_within_four_weeks", float(0.0, 1.0), "P(delay <= 4) of the default geometric pmf (0.6)"),
    key("simulation", "delay_max_weeks", int(0, 520), "truncation of the default geometric pmf (26)"),
    key("estimation", "model", Kind::Choice(&["static", "learning"]), "model to estimate (static)"),
    key("estimation", "replicates", int(1, BIG), "simulation replicates per grid point (50)"),
    key("estimation", "bootstrap_draws", int(0, BIG), "household bootstrap draws, 0 to skip (200)"),
    key("estimation", "objective", Kind::Objective, "objective strategy (corrected_rmse)"),
    key("estimation", "shock_cap_mode", Kind::Choice(&["off", "clip_to_observed"]), "cap simulated shocks at observed spending (off)"),
    key("estimation", "beta_grid", Kind::Grid, "static model (0.5, 3.0, 0.05, 0.01)"),
    key("estimation", "sigma_s_grid", Kind::Grid, "both models (static: 0, 60, 5, 1)"),
    key("estimation", "prior_mean_grid", Kind::Grid, "learning model (1.5, 3.5, 0.5, 0.25)"),
    key("estimation", "prior_sd_grid", Kind::Grid, "learning model (0.04, 0.20, 0.04, 0.02)"),
    key("estimation", "sigma_l_grid", Kind::Grid, "learning model, sd of the learning signal (0.03, 0.15, 0.03, 0.015)"),
    key("econometrics", "event_window", int(1, 52), "event-study window T (4)"),
    key("econometrics", "placebo_draws", int(1, BIG), "placebo reassignments (200)"),
    key("counterfactual", "replicates", int(1, BIG), "replicates averaged per household-year (50)"),
];

fn lookup(section: &str, name: &str) -> Option<&'static KeyInfo> {
    KEYS.iter().find(|k| k.section == section && k.key == name)
}

fn sections() -> Vec<&'static str> {
    let mut s: Vec<&str> = KEYS.iter().map(|k| k.section).collect();
    s.dedup();
    s
}

/// Closest valid spelling, preferring keys of the same section.
fn nearest(section: &str, name: &str) -> String {
    let score = |candidate: &str| strsim::damerau_levenshtein(name, candidate);
    let local = KEYS
        .iter()
        .filter(|k| k.section == section)
        .min_by_key(|k| score(k.key))
        .filter(|k| score(k.key) <= 3)
        .map(|k| k.key.to_string());
    local.unwrap_or_else(|| {
        KEYS.iter()
            .min_by_key(|k| score(k.key))
            .map(|k| format!("{}.{}", k.section, k.key))
            .unwrap_or_default()
    })
}

fn nearest_section(name: &str) -> &'static str {
    sections()
        .into_iter()
        .min_by_key(|s| strsim::damerau_levenshtein(name, s))
        .unwrap_or("run")
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// 1-based line of `[section]` or of `key =` inside it.
fn line_of(src: &str, section: &str, name: Option<&str>) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = strip_comment(raw);
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            if name.is_none() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if let Some(n) = name {
            if current == section {
                if let Some((k, _)) = line.split_once('=') {
                    if k.trim().trim_matches('"') == n {
                        return Some(i + 1);
                    }
                }
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EconometricsSettings {
    pub event_window: u32,
    pub placebo_draws: usize,
}

/// Fully validated configuration with referenced files loaded.
#[derive(Clone, Debug)]
pub struct Config {
    pub source: Option<PathBuf>,
    pub seed: Option<u64>,
    pub contract: CostSharingContract,
    pub population: PopulationConfig,
    pub delays: BillDelayDistribution,
    pub years: u32,
    pub event_spec: EventSpec,
    pub params: SimParams,
    pub estimation: EstimationConfig,
    pub econometrics: EconometricsSettings,
    pub counterfactual_replicates: usize,
    /// Files the configuration read, in key order.
    pub inputs: Vec<PathBuf>,
}

pub const DEFAULT_BETA: f64 = 1.73;
pub const DEFAULT_SIGMA_S: f64 = 15.2;
pub const DEFAULT_LEARNING: LearningParams = LearningParams {
    prior_mean: 2.58,
    prior_var: 0.12 * 0.12,
    signal_var: 0.09 * 0.09,
};
pub const DEFAULT_HOUSEHOLDS: usize = 2000;
pub const DEFAULT_PLACEBO_DRAWS: usize = 200;

impl Default for Config {
    fn default() -> Self {
        Config::from_str("").expect("empty configuration is valid")
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<Config> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let src = std::fs::read_to_string(path)?;
    Config::parse(&src, Some(path))
}

struct Reader<'a> {
    src: &'a str,
    file: String,
    base: PathBuf,
    values: BTreeMap<(&'static str, &'static str), Value>,
}

impl Reader<'_> {
    fn location(&self, section: &str, name: Option<&str>) -> String {
        match line_of(self.src, section, name).or_else(|| line_of(self.src, section, None)) {
            Some(line) => format!("{}:{line}", self.file),
            None => format!("{} [{section}]", self.file),
        }
    }

    fn error(&self, section: &str, name: Option<&str>, message: impl Into<String>) -> Error {
        Error::Config {
            location: self.location(section, name),
            message: message.into(),
        }
    }

    /// Re-anchors a module validation error at a section.
    fn anchor<T>(&self, section: &str, name: Option<&str>, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::FileNotFound(_) => e,
            other => self.error(section, name, other.to_string()),
        })
    }

    fn check(&self, info: &KeyInfo, value: &Value) -> Result<()> {
        let bad = |why: String| Err(self.error(info.section, Some(info.key), format!("`{}` {why}", info.key)));
        match info.kind {
            Kind::Float { min, max } => match as_f64(value) {
                Some(x) if x.is_finite() && x >= min && x <= max => Ok(()),
                Some(x) => bad(format!("= {x} is out of range: expected {}", info.kind)),
                None => bad(format!("must be a number, got {value}")),
            },
            Kind::Int { min, max } => match value.as_integer() {
                Some(x) if x >= min && x <= max => Ok(()),
                Some(x) => bad(format!("= {x} is out of range: expected {}", info.kind)),
                None => bad(format!("must be an integer, got {value}")),
            },
            Kind::Bool => match value {
                Value::Boolean(_) => Ok(()),
                _ => bad(format!("must be true or false, got {value}")),
            },
            Kind::Choice(options) => match value.as_str() {
                Some(s) if options.contains(&s) => Ok(()),
                _ => bad(format!("= {value} is not {}", info.kind)),
            },
            Kind::Objective => match value.as_str() {
                Some(s) if objective_names().contains(&s) => Ok(()),
                _ => bad(format!("= {value} is not {}", info.kind)),
            },
            Kind::Path => match value.as_str() {
                Some(s) if !s.is_empty() => Ok(()),
                _ => bad(format!("must be a non-empty path string, got {value}")),
            },
            Kind::Grid => match grid_axis(value) {
                Some(axis) => axis.validate(info.key).or_else(|e| bad(e.to_string())),
                None => bad(format!("must be {}, got {value}", info.kind)),
            },
        }
    }

    fn f64(&self, section: &'static str, name: &'static str, default: f64) -> f64 {
        self.values.get(&(section, name)).and_then(as_f64).unwrap_or(default)
    }

    fn int(&self, section: &'static str, name: &'static str, default: i64) -> i64 {
        self.values.get(&(section, name)).and_then(Value::as_integer).unwrap_or(default)
    }

    fn str(&self, section: &'static str, name: &'static str) -> Option<&str> {
        self.values.get(&(section, name)).and_then(Value::as_str)
    }

    fn path(&self, section: &'static str, name: &'static str) -> Option<PathBuf> {
        self.str(section, name).map(|s| self.base.join(s))
    }

    fn grid(&self, name: &'static str) -> Option<GridAxis> {
        self.values.get(&("estimation", name)).and_then(grid_axis)
    }

    fn has(&self, section: &'static str, name: &'static str) -> bool {
        self.values.contains_key(&(section, name))
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn grid_axis(v: &Value) -> Option<GridAxis> {
    if let Some(x) = as_f64(v) {
        return Some(GridAxis::fixed(x));
    }
    let items: Vec<f64> = v.as_array()?.iter().map(as_f64).collect::<Option<_>>()?;
    match items[..] {
        [min, max, step] => Some(GridAxis::new(min, max, step, None)),
        [min, max, step, refine] => Some(GridAxis::new(min, max, step, Some(refine))),
        _ => None,
    }
}

impl Config {
    /// Parses configuration text; `origin` anchors messages and relative paths.
    pub fn parse(src: &str, origin: Option<&Path>) -> Result<Config> {
        let file = origin.map_or_else(|| "<config>".to_string(), |p| p.display().to_string());
        let base = origin
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let table: toml::Table = src.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map_or(1, |s| src[..s.start.min(src.len())].lines().count().max(1));
            Error::Config {
                location: format!("{file}:{line}"),
                message: e.message().to_string(),
            }
        })?;

        let mut reader = Reader {
            src,
            file,
            base,
            values: BTreeMap::new(),
        };
        for (section, body) in &table {
            let Some(body) = body.as_table() else {
                let home = KEYS.iter().find(|k| k.key == section).map_or("run", |k| k.section);
                return Err(reader.error(
                    "",
                    Some(section),
                    format!("`{section}` must sit inside a section, e.g. [{home}]"),
                ));
            };
            if !sections().contains(&section.as_str()) {
                return Err(reader.error(
                    section,
                    None,
                    format!("unknown section [{section}]; did you mean [{}]?", nearest_section(section)),
                ));
            }
            for (name, value) in body {
                let Some(info) = lookup(section, name) else {
                    return Err(reader.error(
                        section,
                        Some(name),
                        format!("unknown key `{name}` in [{section}]; did you mean `{}`?", nearest(section, name)),
                    ));
                };
                reader.check(info, value)?;
                reader.values.insert((info.section, info.key), value.clone());
            }
        }
        reader.build()
    }

    /// Parses configuration text with no file behind it.
    pub fn from_str(src: &str) -> Result<Config> {
        Config::parse(src, None)
    }

    /// Master seed, falling back to `default`.
    pub fn seed_or(&self, default: u64) -> u64 {
        self.seed.unwrap_or(default)
    }
}

impl Reader<'_> {
    fn build(&self) -> Result<Config> {
        let mut inputs = Vec::new();

        let contract = CostSharingContract {
            deductible: self.f64("contract", "deductible", 1000.0),
            coinsurance: self.f64("contract", "coinsurance", 0.2),
            oop_max: self.f64("contract", "oop_max", 3000.0),
            plan_year_weeks: self.int("contract", "weeks", DEFAULT_PLAN_YEAR_WEEKS as i64) as u32,
        };
        self.anchor("contract", None, contract.validate())?;

        let cells = match self.path("population", "cell_table") {
            Some(path) => {
                inputs.push(path.clone());
                self.anchor("population", Some("cell_table"), read_cell_table(&path))?
            }
            None => {
                let base = CellMoments {
                    mean: self.f64("population", "base_mean", DEFAULT_BASE_MOMENTS.mean),
                    median: self.f64("population", "base_median", DEFAULT_BASE_MOMENTS.median),
                    sd: self.f64("population", "base_sd", DEFAULT_BASE_MOMENTS.sd),
                };
                self.anchor("population", None, default_cells(base))?
            }
        };
        let population = PopulationConfig {
            households: self.int("population", "households", DEFAULT_HOUSEHOLDS as i64) as usize,
            mean_household_size: self.f64("population", "mean_household_size", 2.5),
            max_household_size: self.int("population", "max_household_size", 5) as usize,
            cells,
            contract_menu: vec![(contract, 1.0)],
            omega_log_mean: self.f64("population", "omega_log_mean", default_omega_log_mean()),
            omega_log_sd: self.f64("population", "omega_log_sd", DEFAULT_OMEGA_LOG_SD),
        };
        self.anchor("population", None, population.validate())?;

        let delays = match self.path("simulation", "delay_pmf") {
            Some(path) => {
                inputs.push(path.clone());
                self.anchor("simulation", Some("delay_pmf"), BillDelayDistribution::read_csv(&path))?
            }
            None => self.anchor(
                "simulation",
                None,
                BillDelayDistribution::truncated_geometric(
                    self.f64("simulation", "delay_share_within_four_weeks", DEFAULT_SHARE_WITHIN_FOUR_WEEKS),
                    self.int("simulation", "delay_max_weeks", DEFAULT_MAX_DELAY as i64) as u32,
                ),
            )?,
        };

        let signal = SignalParams {
            beta: self.f64("signal", "beta", DEFAULT_BETA),
            sigma_s: self.f64("signal", "sigma_s", DEFAULT_SIGMA_S),
        };
        let learning = LearningParams {
            prior_mean: self.f64("learning", "prior_mean", DEFAULT_LEARNING.prior_mean),
            prior_var: self.f64("learning", "prior_var", DEFAULT_LEARNING.prior_var),
            signal_var: self.f64("learning", "learning_signal_var", DEFAULT_LEARNING.signal_var),
        };
        let learning_on = matches!(self.values.get(&("learning", "enabled")), Some(Value::Boolean(true)));
        let params = if learning_on {
            SimParams::learning_model(signal.sigma_s, learning)
        } else {
            SimParams { signal, ..SimParams::static_model(signal.beta, signal.sigma_s) }
        };
        self.anchor("signal", None, params.validate())?;

        let estimation = self.estimation()?;

        Ok(Config {
            source: None,
            seed: self.values.get(&("run", "seed")).and_then(Value::as_integer).map(|s| s as u64),
            contract,
            population,
            delays,
            years: self.int("simulation", "years", 1) as u32,
            event_spec: EventSpec {
                threshold: self.values.get(&("simulation", "event_threshold")).and_then(as_f64),
            },
            params,
            estimation,
            econometrics: EconometricsSettings {
                event_window: self.int("econometrics", "event_window", DEFAULT_EVENT_WINDOW as i64) as u32,
                placebo_draws: self.int("econometrics", "placebo_draws", DEFAULT_PLACEBO_DRAWS as i64) as usize,
            },
            counterfactual_replicates: self.int("counterfactual", "replicates", DEFAULT_COUNTERFACTUAL_REPLICATES as i64)
                as usize,
            inputs,
        })
        .map(|mut c| {
            if self.file != "<config>" {
                c.source = Some(PathBuf::from(&self.file));
            }
            c
        })
    }

    fn estimation(&self) -> Result<EstimationConfig> {
        let learning = self.str("estimation", "model") == Some("learning");
        let mut cfg = if learning {
            EstimationConfig::learning_default()
        } else {
            EstimationConfig::static_default()
        };
        let own: &[&'static str] = if learning {
            &["prior_mean_grid", "prior_sd_grid", "sigma_s_grid", "sigma_l_grid"]
        } else {
            &["beta_grid", "sigma_s_grid"]
        };
        for name in ["beta_grid", "prior_mean_grid", "prior_sd_grid", "sigma_l_grid"] {
            if self.has("estimation", name) && !own.contains(&name) {
                let model = if learning { "learning" } else { "static" };
                return Err(self.error(
                    "estimation",
                    Some(name),
                    format!("`{name}` does not apply to the {model} model"),
                ));
            }
        }
        for (axis, name) in cfg.grid.iter_mut().zip(own) {
            if let Some(g) = self.grid(name) {
                *axis = g;
            }
        }
        cfg.n_replicates = self.int("estimation", "replicates", cfg.n_replicates as i64) as usize;
        cfg.bootstrap_draws = self.int("estimation", "bootstrap_draws", cfg.bootstrap_draws as i64) as usize;
        if let Some(o) = self.str("estimation", "objective") {
            cfg.objective = o.to_string();
        }
        if self.str("estimation", "shock_cap_mode") == Some("clip_to_observed") {
            cfg.shock_cap = ShockCap::ClipToObserved;
        }
        if let Some(seed) = self.values.get(&("run", "seed")).and_then(Value::as_integer) {
            cfg.seed = seed as u64;
        }
        debug_assert_eq!(cfg.model == ModelKind::Learning, learning);
        self.anchor("estimation", None, cfg.validate())?;
        Ok(cfg)
    }
}
