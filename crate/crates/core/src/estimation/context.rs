//! Observed claim histories and simulated draws for conditional prediction.
//!
//! For every observed household-week the household's information set at the
//! start of the week is rebuilt from the claim history: billed OOP, the true
//! OOP and count of unbilled claims, and (under learning) the number of bills
//! seen so far. Simulated quantities (shocks, signal noise, learning signals,
//! prior draws) are drawn once per replicate and reused at every parameter
//! value, so objective differences across grid points are not driven by
//! simulation noise.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::beliefs::{c_hat, BetaBelief};
use crate::contract::CostSharingContract;
use crate::demand::optimal_spending_unchecked;
use crate::error::{Error, Result};
use super::ShockCap;
use crate::rng::{Checksum, Purpose, StreamKey};
use crate::simulator::{BillDelayDistribution, ClaimRecord, PanelRecord, Population, SimParams};

/// Observed panel with the population it was drawn from.
#[derive(Clone, Debug)]
pub struct ObservedData {
    pub population: Population,
    pub records: Vec<PanelRecord>,
    /// Claim-level bill timing. Without it, bill delays are simulated.
    pub claims: Option<Vec<ClaimRecord>>,
}

/// A household plan-year: a contiguous block of observations.
#[derive(Clone, Debug)]
pub(crate) struct Unit {
    /// Index into `Population::households`.
    pub household: usize,
    pub year: u32,
    pub start: usize,
    pub weeks: usize,
}

#[derive(Clone, Debug, Default)]
struct History {
    known: Vec<f64>,
    pending_oop: Vec<f64>,
    pending_n: Vec<u32>,
    billed_n: Vec<u32>,
}

#[derive(Clone, Copy, Debug)]
struct Claim {
    consumed: u32,
    bill: u32,
    oop: f64,
}

/// Settings that fix the simulated draws.
#[derive(Clone, Debug)]
pub struct ContextOptions {
    pub replicates: usize,
    pub seed: u64,
    pub delays: BillDelayDistribution,
    /// Draw learning signals and prior draws.
    pub learning: bool,
    pub shock_cap: ShockCap,
}

/// Fit of one household at one parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct HouseholdFit {
    pub weeks: usize,
    /// `sum((y - mean_r m_r)^2 - var_r(m_r) / R)` over the household's weeks.
    pub corrected_sse: f64,
    /// Sum of squared errors per replicate.
    pub replicate_sse: Vec<f64>,
}

pub struct EstimationContext {
    pub(crate) population: Population,
    pub(crate) delays: BillDelayDistribution,
    pub(crate) units: Vec<Unit>,
    /// Population index of each estimation household, in panel order.
    pub(crate) households: Vec<usize>,
    /// Units of each household as a range into `units`.
    household_units: Vec<std::ops::Range<usize>>,
    /// Observed weekly household spending.
    pub(crate) y: Vec<f64>,
    replicates: usize,
    seed: u64,
    /// Observation-major `[i * stride + r]`; stride 1 when claims are observed.
    history: History,
    history_stride: usize,
    lambda: Vec<f64>,
    signal_z: Vec<f64>,
    learning_z: Option<Vec<f64>>,
    /// Unit-major `[u * R + r]`.
    prior_z: Option<Vec<f64>>,
}

impl EstimationContext {
    pub fn new(data: &ObservedData, opts: &ContextOptions) -> Result<Self> {
        if opts.replicates == 0 {
            return Err(Error::input("estimation needs at least one replicate"));
        }
        let index = data.population.household_index();
        let (units, households, household_units) = layout(&data.records, &data.population, &index)?;
        let y: Vec<f64> = data.records.iter().map(PanelRecord::household_spend).collect();
        let n = y.len();
        let r_count = opts.replicates;

        let observed_claims = match &data.claims {
            Some(c) => Some(group_claims(c, &units, &data.population)?),
            None => None,
        };
        let history_stride = if observed_claims.is_some() { 1 } else { r_count };

        let mut ctx = EstimationContext {
            population: data.population.clone(),
            delays: opts.delays.clone(),
            households,
            household_units,
            y,
            replicates: r_count,
            seed: opts.seed,
            history: History {
                known: vec![0.0; n * history_stride],
                pending_oop: vec![0.0; n * history_stride],
                pending_n: vec![0; n * history_stride],
                billed_n: vec![0; n * history_stride],
            },
            history_stride,
            lambda: vec![0.0; n * r_count],
            signal_z: vec![0.0; n * r_count],
            learning_z: opts.learning.then(|| vec![0.0; n * r_count]),
            prior_z: opts.learning.then(|| vec![0.0; units.len() * r_count]),
            units,
        };

        // Draw everything unit by unit; each unit writes disjoint slices.
        let per_unit: Vec<UnitDraws> = ctx
            .units
            .par_iter()
            .enumerate()
            .map(|(u, unit)| {
                let claims = observed_claims.as_ref().map(|c| c.get(&u).map_or(&[][..], |v| &v[..]));
                ctx.draw_unit(unit, &data.records[unit.start..unit.start + unit.weeks], claims, opts)
            })
            .collect();
        for (u, d) in per_unit.into_iter().enumerate() {
            let unit = &ctx.units[u];
            let (s, len) = (unit.start, unit.weeks);
            let hs = ctx.history_stride;
            ctx.history.known[s * hs..(s + len) * hs].copy_from_slice(&d.history.known);
            ctx.history.pending_oop[s * hs..(s + len) * hs].copy_from_slice(&d.history.pending_oop);
            ctx.history.pending_n[s * hs..(s + len) * hs].copy_from_slice(&d.history.pending_n);
            ctx.history.billed_n[s * hs..(s + len) * hs].copy_from_slice(&d.history.billed_n);
            ctx.lambda[s * r_count..(s + len) * r_count].copy_from_slice(&d.lambda);
            ctx.signal_z[s * r_count..(s + len) * r_count].copy_from_slice(&d.signal_z);
            if let Some(lz) = &mut ctx.learning_z {
                lz[s * r_count..(s + len) * r_count].copy_from_slice(&d.learning_z);
            }
            if let Some(pz) = &mut ctx.prior_z {
                pz[u * r_count..(u + 1) * r_count].copy_from_slice(&d.prior_z);
            }
        }
        Ok(ctx)
    }

    pub fn replicates(&self) -> usize {
        self.replicates
    }

    pub fn household_count(&self) -> usize {
        self.households.len()
    }

    pub fn observation_count(&self) -> usize {
        self.y.len()
    }

    pub fn has_learning_draws(&self) -> bool {
        self.learning_z.is_some()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Population id of each estimation household, in panel order.
    pub fn household_ids(&self) -> Vec<u64> {
        self.households.iter().map(|&h| self.population.households[h].id).collect()
    }

    /// Checksum of the simulated shocks; identical for every parameter value.
    pub fn shock_checksum(&self) -> u64 {
        let mut sum = Checksum::default();
        self.lambda.iter().for_each(|&x| sum.add_f64(x));
        sum.0
    }

    fn draw_unit(
        &self,
        unit: &Unit,
        records: &[PanelRecord],
        observed: Option<&[Claim]>,
        opts: &ContextOptions,
    ) -> UnitDraws {
        let hh = &self.population.households[unit.household];
        let r_count = opts.replicates;
        let len = unit.weeks;
        let mut out = UnitDraws {
            history: History::default(),
            lambda: vec![0.0; len * r_count],
            signal_z: vec![0.0; len * r_count],
            learning_z: vec![0.0; if opts.learning { len * r_count } else { 0 }],
            prior_z: vec![0.0; if opts.learning { r_count } else { 0 }],
        };
        let mut histories: Vec<History> = Vec::new();
        if let Some(claims) = observed {
            histories.push(build_history(claims, len));
        }
        for r in 0..r_count {
            let key = |p| {
                StreamKey::new(opts.seed, p)
                    .replicate(r as u64)
                    .year(unit.year as u64)
                    .rng(hh.id)
            };
            let (mut shock, mut signal, mut delay) =
                (key(Purpose::EstimationShock), key(Purpose::EstimationSignal), key(Purpose::EstimationDelay));
            let mut learning = key(Purpose::EstimationLearning);
            let mut wz = vec![0.0; len];
            let mut lz = vec![0.0; len];
            let mut simulated: Vec<Claim> = Vec::new();
            for (w, rec) in records.iter().enumerate() {
                let lambda: f64 = self
                    .population
                    .member_cells(hh)
                    .map(|cell| cell.shock_at(shock.sample(StandardNormal)))
                    .sum();
                out.lambda[w * r_count + r] = match opts.shock_cap {
                    ShockCap::Off => lambda,
                    ShockCap::ClipToObserved => lambda.min(rec.household_spend()),
                };
                wz[w] = signal.sample(StandardNormal);
                let u: f64 = delay.gen();
                if opts.learning {
                    lz[w] = learning.sample(StandardNormal);
                }
                if observed.is_none() && rec.household_spend() > 0.0 {
                    simulated.push(Claim {
                        consumed: rec.week,
                        bill: rec.week + opts.delays.quantile(u),
                        oop: rec.true_oop_week,
                    });
                }
            }
            if opts.learning {
                out.prior_z[r] = key(Purpose::EstimationPrior).sample(StandardNormal);
            }
            let claims: &[Claim] = match observed {
                Some(c) => c,
                None => {
                    histories.push(build_history(&simulated, len));
                    &simulated
                }
            };
            for t in 0..len {
                let week = t as u32 + 1;
                let (mut zp, mut zl) = (0.0, 0.0);
                for c in claims {
                    if c.consumed < week {
                        let idx = (c.consumed - 1) as usize;
                        if c.bill >= week {
                            zp += wz[idx];
                        } else {
                            zl += lz[idx];
                        }
                    }
                }
                out.signal_z[t * r_count + r] = zp;
                if opts.learning {
                    out.learning_z[t * r_count + r] = zl;
                }
            }
        }
        // Interleave histories observation-major.
        let stride = histories.len();
        out.history = History {
            known: vec![0.0; len * stride],
            pending_oop: vec![0.0; len * stride],
            pending_n: vec![0; len * stride],
            billed_n: vec![0; len * stride],
        };
        for (k, h) in histories.iter().enumerate() {
            for t in 0..len {
                out.history.known[t * stride + k] = h.known[t];
                out.history.pending_oop[t * stride + k] = h.pending_oop[t];
                out.history.pending_n[t * stride + k] = h.pending_n[t];
                out.history.billed_n[t * stride + k] = h.billed_n[t];
            }
        }
        out
    }

    /// Fits every household at `params`, in panel order.
    pub fn household_fits(&self, params: &SimParams) -> Vec<HouseholdFit> {
        (0..self.households.len())
            .into_par_iter()
            .map(|slot| self.household_fit(slot, params))
            .collect()
    }

    /// Simulated mean spending for every observation.
    pub fn predicted_mean(&self, params: &SimParams) -> Vec<f64> {
        let r_count = self.replicates;
        let mut m = vec![0.0; r_count];
        let mut out = Vec::with_capacity(self.y.len());
        for (u, unit) in self.units.iter().enumerate() {
            let setup = self.unit_setup(u, params);
            for i in unit.start..unit.start + unit.weeks {
                self.predict(i, &setup, params, &mut m);
                out.push(m.iter().sum::<f64>() / r_count as f64);
            }
        }
        out
    }

    fn household_fit(&self, slot: usize, params: &SimParams) -> HouseholdFit {
        let r_count = self.replicates;
        let mut fit = HouseholdFit {
            weeks: 0,
            corrected_sse: 0.0,
            replicate_sse: vec![0.0; r_count],
        };
        let mut m = vec![0.0; r_count];
        for u in self.household_units[slot].clone() {
            let unit = &self.units[u];
            let setup = self.unit_setup(u, params);
            for i in unit.start..unit.start + unit.weeks {
                self.predict(i, &setup, params, &mut m);
                let y = self.y[i];
                let mean = m.iter().sum::<f64>() / r_count as f64;
                let var = if r_count > 1 {
                    m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r_count - 1) as f64
                } else {
                    0.0
                };
                fit.corrected_sse += (y - mean).powi(2) - var / r_count as f64;
                for (sse, x) in fit.replicate_sse.iter_mut().zip(&m) {
                    *sse += (y - x).powi(2);
                }
                fit.weeks += 1;
            }
        }
        fit
    }

    fn unit_setup(&self, u: usize, params: &SimParams) -> UnitSetup {
        let hh = &self.population.households[self.units[u].household];
        let prior_means = match (&params.learning, &self.prior_z) {
            (Some(lp), Some(pz)) => {
                let sd = lp.prior_var.sqrt();
                pz[u * self.replicates..(u + 1) * self.replicates]
                    .iter()
                    .map(|z| lp.prior_mean + sd * z)
                    .collect()
            }
            _ => Vec::new(),
        };
        UnitSetup {
            contract: hh.contract,
            omega: hh.omega.get(),
            prior_means,
        }
    }

    /// Spending predicted by every replicate for observation `i`.
    fn predict(&self, i: usize, setup: &UnitSetup, params: &SimParams, out: &mut [f64]) {
        let r_count = self.replicates;
        let hs = self.history_stride;
        let sigma_s = params.signal.sigma_s;
        let lambda = &self.lambda[i * r_count..(i + 1) * r_count];
        let zs = &self.signal_z[i * r_count..(i + 1) * r_count];
        let k = &setup.contract;
        let shared = hs == 1;
        let h0 = i * hs;

        // With no unbilled claims the perceived position is the billed total
        // in every replicate.
        if shared && self.history.pending_n[h0] == 0 {
            let ch = c_hat(self.history.known[h0].max(0.0), 0.0, k);
            let shift = setup.omega * (1.0 - ch);
            for (o, l) in out.iter_mut().zip(lambda) {
                *o = (l + shift).max(0.0);
            }
            return;
        }

        for r in 0..r_count {
            let h = h0 + if shared { 0 } else { r };
            let n = self.history.pending_n[h];
            let beta = match (&params.learning, &self.learning_z) {
                (Some(lp), Some(lz)) => {
                    let billed = self.history.billed_n[h];
                    let prior = BetaBelief {
                        mean: setup.prior_means[r],
                        variance: lp.prior_var,
                    };
                    let sum = billed as f64 + lp.signal_var.sqrt() * lz[i * r_count + r];
                    prior.after_signals(billed, sum, lp.signal_var).mean
                }
                _ => params.signal.beta,
            };
            let theta = self.history.known[h] + beta * self.history.pending_oop[h] + sigma_s * zs[r];
            let var = n as f64 * sigma_s * sigma_s;
            let ch = c_hat(theta.max(0.0), var, k);
            out[r] = optimal_spending_unchecked(lambda[r], setup.omega, ch);
        }
    }
}

struct UnitSetup {
    contract: CostSharingContract,
    omega: f64,
    prior_means: Vec<f64>,
}

struct UnitDraws {
    history: History,
    lambda: Vec<f64>,
    signal_z: Vec<f64>,
    learning_z: Vec<f64>,
    prior_z: Vec<f64>,
}

fn build_history(claims: &[Claim], weeks: usize) -> History {
    let mut h = History {
        known: vec![0.0; weeks],
        pending_oop: vec![0.0; weeks],
        pending_n: vec![0; weeks],
        billed_n: vec![0; weeks],
    };
    for t in 0..weeks {
        let week = t as u32 + 1;
        for c in claims.iter().filter(|c| c.consumed < week) {
            if c.bill >= week {
                h.pending_oop[t] += c.oop;
                h.pending_n[t] += 1;
            } else {
                h.known[t] += c.oop;
                h.billed_n[t] += 1;
            }
        }
    }
    h
}

type Layout = (Vec<Unit>, Vec<usize>, Vec<std::ops::Range<usize>>);

/// Splits the panel into household plan-years of consecutive weeks `1..=W`.
fn layout(records: &[PanelRecord], pop: &Population, index: &BTreeMap<u64, usize>) -> Result<Layout> {
    if records.is_empty() {
        return Err(Error::input("observed panel is empty"));
    }
    let mut units: Vec<Unit> = Vec::new();
    let mut households: Vec<usize> = Vec::new();
    let mut ranges: Vec<std::ops::Range<usize>> = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let r = &records[i];
        let h = *index.get(&r.household_id).ok_or_else(|| {
            Error::Alignment(format!("household {} is not in the population", r.household_id))
        })?;
        let weeks = pop.households[h].contract.plan_year_weeks as usize;
        if i + weeks > records.len() {
            return Err(Error::Alignment(format!(
                "household {} year {} has fewer than {weeks} weeks",
                r.household_id, r.year
            )));
        }
        for (w, rec) in records[i..i + weeks].iter().enumerate() {
            if rec.household_id != r.household_id || rec.year != r.year || rec.week as usize != w + 1 {
                return Err(Error::Alignment(format!(
                    "expected household {} year {} week {}, found household {} year {} week {}",
                    r.household_id,
                    r.year,
                    w + 1,
                    rec.household_id,
                    rec.year,
                    rec.week
                )));
            }
        }
        let slot = match households.last() {
            Some(&last) if last == h => households.len() - 1,
            _ => {
                if households.contains(&h) {
                    return Err(Error::Alignment(format!(
                        "household {} appears in more than one block",
                        r.household_id
                    )));
                }
                households.push(h);
                ranges.push(units.len()..units.len());
                households.len() - 1
            }
        };
        units.push(Unit {
            household: h,
            year: r.year,
            start: i,
            weeks,
        });
        ranges[slot].end = units.len();
        i += weeks;
    }
    Ok((units, households, ranges))
}

fn group_claims(claims: &[ClaimRecord], units: &[Unit], pop: &Population) -> Result<BTreeMap<usize, Vec<Claim>>> {
    let by_key: BTreeMap<(u64, u32), usize> = units
        .iter()
        .enumerate()
        .map(|(u, unit)| ((pop.households[unit.household].id, unit.year), u))
        .collect();
    let mut out: BTreeMap<usize, Vec<Claim>> = BTreeMap::new();
    for c in claims {
        let Some(&u) = by_key.get(&(c.household_id, c.year)) else {
            return Err(Error::Alignment(format!(
                "claim for household {} year {} has no panel rows",
                c.household_id, c.year
            )));
        };
        if c.consumed_week == 0 || c.consumed_week as usize > units[u].weeks || c.bill_week < c.consumed_week {
            return Err(Error::input(format!(
                "claim for household {} has consumed week {} and bill week {}",
                c.household_id, c.consumed_week, c.bill_week
            )));
        }
        out.entry(u).or_default().push(Claim {
            consumed: c.consumed_week,
            bill: c.bill_week,
            oop: c.true_oop,
        });
    }
    Ok(out)
}
