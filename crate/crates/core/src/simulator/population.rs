//! Synthetic household populations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contract::CostSharingContract;
use crate::demand::{household_omega, MoralHazardParam};
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::shocks::ShockCellParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    /// Index into [`Population::cells`].
    pub cell: usize,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Household {
    pub id: u64,
    pub contract: CostSharingContract,
    pub members: Vec<Member>,
    pub omega: MoralHazardParam,
}

impl Household {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub cells: Vec<ShockCellParams>,
    pub households: Vec<Household>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationConfig {
    pub households: usize,
    pub mean_household_size: f64,
    pub max_household_size: usize,
    pub cells: Vec<ShockCellParams>,
    /// Contracts with selection weights.
    pub contract_menu: Vec<(CostSharingContract, f64)>,
    pub omega_log_mean: f64,
    pub omega_log_sd: f64,
}

pub const DEFAULT_OMEGA_LOG_SD: f64 = 0.5;

pub fn default_omega_log_mean() -> f64 {
    300f64.ln()
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.households == 0 {
            return Err(Error::input("population needs at least one household"));
        }
        if self.max_household_size == 0
            || !(self.mean_household_size >= 1.0)
            || self.mean_household_size > self.max_household_size as f64
        {
            return Err(Error::input(format!(
                "mean household size {} must lie in [1, {}]",
                self.mean_household_size, self.max_household_size
            )));
        }
        if self.cells.is_empty() {
            return Err(Error::input("population needs at least one shock cell"));
        }
        for c in &self.cells {
            c.validate()?;
        }
        if self.contract_menu.is_empty() || self.contract_menu.iter().any(|(_, w)| !(*w > 0.0)) {
            return Err(Error::input("contract menu must be non-empty with positive weights"));
        }
        for (k, _) in &self.contract_menu {
            k.validate()?;
        }
        if !(self.omega_log_sd >= 0.0) || !self.omega_log_mean.is_finite() {
            return Err(Error::input("omega log-normal parameters are invalid"));
        }
        Ok(())
    }
}

/// Draws households, member cells, contracts and member omegas.
///
/// Household size is `1 + Binomial(max - 1, (mean - 1) / (max - 1))`, which
/// has exactly the configured mean.
pub fn generate_population(cfg: &PopulationConfig, seed: u64) -> Result<Population> {
    cfg.validate()?;
    let extra_trials = cfg.max_household_size as u64 - 1;
    let size_dist = if extra_trials > 0 {
        let p = (cfg.mean_household_size - 1.0) / extra_trials as f64;
        Some(Binomial::new(extra_trials, p.clamp(0.0, 1.0)).map_err(|e| Error::input(e.to_string()))?)
    } else {
        None
    };
    let total_weight: f64 = cfg.contract_menu.iter().map(|(_, w)| w).sum();

    let households = (0..cfg.households as u64)
        .map(|id| {
            let mut size_rng = StreamKey::new(seed, Purpose::HouseholdSize).rng(id);
            let mut cell_rng = StreamKey::new(seed, Purpose::MemberCell).rng(id);
            let mut omega_rng = StreamKey::new(seed, Purpose::MemberOmega).rng(id);
            let mut contract_rng = StreamKey::new(seed, Purpose::ContractChoice).rng(id);

            let size = 1 + size_dist.map_or(0, |d| d.sample(&mut size_rng)) as usize;
            let members: Vec<Member> = (0..size)
                .map(|_| {
                    let z: f64 = omega_rng.sample(StandardNormal);
                    Member {
                        cell: cell_rng.gen_range(0..cfg.cells.len()),
                        omega: (cfg.omega_log_mean + cfg.omega_log_sd * z).exp(),
                    }
                })
                .collect();

            let mut u = contract_rng.gen::<f64>() * total_weight;
            let mut contract = cfg.contract_menu[cfg.contract_menu.len() - 1].0;
            for (k, w) in &cfg.contract_menu {
                if u < *w {
                    contract = *k;
                    break;
                }
                u -= w;
            }

            let omegas: Vec<f64> = members.iter().map(|m| m.omega).collect();
            Ok(Household {
                id,
                contract,
                omega: household_omega(&omegas)?,
                members,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Population {
        cells: cfg.cells.clone(),
        households,
    })
}

#[derive(Serialize, Deserialize)]
struct MemberRow {
    household_id: u64,
    member: usize,
    cell_id: String,
    mu: f64,
    sigma: f64,
    kappa: f64,
    omega: f64,
    deductible: f64,
    coinsurance: f64,
    oop_max: f64,
    weeks: u32,
}

impl Population {
    pub fn household_index(&self) -> BTreeMap<u64, usize> {
        self.households.iter().enumerate().map(|(i, h)| (h.id, i)).collect()
    }

    pub fn member_cells<'a>(&'a self, h: &'a Household) -> impl Iterator<Item = &'a ShockCellParams> + 'a {
        h.members.iter().map(move |m| &self.cells[m.cell])
    }

    /// One row per member; cell parameters and contract terms are repeated.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for h in &self.households {
            for (i, m) in h.members.iter().enumerate() {
                let cell = &self.cells[m.cell];
                w.serialize(MemberRow {
                    household_id: h.id,
                    member: i,
                    cell_id: cell.cell_id.clone(),
                    mu: cell.mu,
                    sigma: cell.sigma,
                    kappa: cell.kappa,
                    omega: m.omega,
                    deductible: h.contract.deductible,
                    coinsurance: h.contract.coinsurance,
                    oop_max: h.contract.oop_max,
                    weeks: h.contract.plan_year_weeks,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let mut cells: Vec<ShockCellParams> = Vec::new();
        let mut cell_index: BTreeMap<String, usize> = BTreeMap::new();
        let mut households: Vec<Household> = Vec::new();
        for row in csv::Reader::from_path(path)?.deserialize() {
            let row: MemberRow = row?;
            let cell = *cell_index.entry(row.cell_id.clone()).or_insert_with(|| {
                cells.push(ShockCellParams {
                    cell_id: row.cell_id.clone(),
                    mu: row.mu,
                    sigma: row.sigma,
                    kappa: row.kappa,
                });
                cells.len() - 1
            });
            let contract = CostSharingContract {
                deductible: row.deductible,
                coinsurance: row.coinsurance,
                oop_max: row.oop_max,
                plan_year_weeks: row.weeks,
            };
            contract.validate()?;
            let member = Member { cell, omega: row.omega };
            match households.last_mut() {
                Some(h) if h.id == row.household_id => h.members.push(member),
                _ => households.push(Household {
                    id: row.household_id,
                    contract,
                    members: vec![member],
                    omega: MoralHazardParam::new(1.0)?,
                }),
            }
        }
        if households.is_empty() {
            return Err(Error::input(format!("population file {} is empty", path.display())));
        }
        for h in &mut households {
            let omegas: Vec<f64> = h.members.iter().map(|m| m.omega).collect();
            h.omega = household_omega(&omegas)?;
        }
        for c in &cells {
            c.validate()?;
        }
        Ok(Population { cells, households })
    }
}
