//! Weekly household simulation.
//!
//! Each week runs four steps in order:
//!
//! 1. form the perceived position `theta` from billed OOP plus the signals of
//!    unbilled claims, and the expected marginal cost `c_hat`;
//! 2. realize the household shock;
//! 3. choose spending, price it at the true position, and file a claim with a
//!    signal and a bill delay;
//! 4. resolve claims whose bill arrives this week (and, under learning,
//!    update the belief about the bias once per bill).
//!
//! All randomness comes from counter-based streams keyed by
//! `(seed, replicate, year, purpose, household)`, so households can be
//! simulated in any order or in parallel with identical output.

pub mod delay;
pub mod events;
pub mod panel;
pub mod population;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beliefs::{
    c_hat, learning_signal_from_z, perceived_theta, perceived_theta_with_belief, signal_from_noise, update_belief, BetaBelief, LearningParams, PendingClaim,
    SignalParams,
};
use crate::contract::{CostSharingContract, SpendingPosition};
use crate::demand::{optimal_spending_unchecked, MoralHazardParam};
use crate::error::Result;
use crate::rng::{Checksum, Purpose, StreamKey};

pub use delay::BillDelayDistribution;
pub use events::{mark_index_events, read_events_file, write_events_file, EventSpec, IndexEvent};
pub use panel::{ClaimRecord, PanelRecord};
pub use population::{generate_population, Household, Population, PopulationConfig};

/// Structural parameters of the information environment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub signal: SignalParams,
    /// Present for the learning model; `signal.beta` is then unused.
    pub learning: Option<LearningParams>,
    /// Every bill arrives in the week of service.
    #[serde(default)]
    pub instant_bills: bool,
}

impl SimParams {
    pub fn static_model(beta: f64, sigma_s: f64) -> Self {
        Self {
            signal: SignalParams { beta, sigma_s },
            learning: None,
            instant_bills: false,
        }
    }

    pub fn learning_model(sigma_s: f64, learning: LearningParams) -> Self {
        Self {
            signal: SignalParams { beta: learning.prior_mean, sigma_s },
            learning: Some(learning),
            instant_bills: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        if let Some(lp) = &self.learning {
            lp.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BiasBelief {
    Fixed(f64),
    Learning(BetaBelief),
}

impl BiasBelief {
    pub fn mean(&self) -> f64 {
        match self {
            BiasBelief::Fixed(b) => *b,
            BiasBelief::Learning(b) => b.mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HouseholdState {
    pub contract: CostSharingContract,
    pub omega: MoralHazardParam,
    /// True cumulative spending and OOP.
    pub position: SpendingPosition,
    /// OOP of claims whose bills have arrived.
    pub known_oop: f64,
    pub pending: Vec<PendingClaim>,
    pub belief: BiasBelief,
}

impl HouseholdState {
    pub fn new(contract: CostSharingContract, omega: MoralHazardParam, belief: BiasBelief) -> Self {
        Self {
            contract,
            omega,
            position: SpendingPosition::default(),
            known_oop: 0.0,
            pending: Vec::new(),
            belief,
        }
    }

    pub fn unbilled_oop(&self) -> f64 {
        self.pending.iter().map(|c| c.true_oop).sum()
    }
}

/// Pre-drawn randomness for one household-week.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeekDraws {
    pub shock: f64,
    pub signal_z: f64,
    pub delay: u32,
    pub learning_z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeekOutcome {
    pub spend: f64,
    pub true_oop: f64,
    pub theta_mean: f64,
    pub theta_var: f64,
    pub c_hat: f64,
    /// Belief about the bias at step 1.
    pub belief_mean: f64,
    pub claim: Option<PendingClaim>,
}

/// Advances a household by one week.
pub fn step_week(
    state: &mut HouseholdState,
    week: u32,
    params: &SimParams,
    draws: WeekDraws,
) -> Result<WeekOutcome> {
    let sigma_s = params.signal.sigma_s;
    let belief_mean = state.belief.mean();

    // 1. perceived position and expected marginal cost
    let theta = match state.belief {
        BiasBelief::Fixed(_) => perceived_theta(state.known_oop, &state.pending, sigma_s),
        BiasBelief::Learning(b) => perceived_theta_with_belief(state.known_oop, &state.pending, b.mean, sigma_s),
    };
    let theta_mean = theta.mean.max(0.0);
    let c_hat = c_hat(theta_mean, theta.var, &state.contract);

    // 2-3. shock, spending choice, claim
    let spend = optimal_spending_unchecked(draws.shock, state.omega.get(), c_hat);
    let (position, true_oop) = state.contract.advance(state.position, spend)?;
    state.position = position;
    let claim = (spend > 0.0).then(|| {
        let noise = sigma_s * draws.signal_z;
        let delay = if params.instant_bills { 0 } else { draws.delay };
        PendingClaim {
            true_oop,
            signal: signal_from_noise(true_oop, belief_mean, noise),
            noise,
            learning_z: draws.learning_z,
            consumed_week: week,
            bill_week: week + delay,
        }
    });
    if let Some(c) = claim {
        state.pending.push(c);
    }

    // 4. bills arriving this week
    resolve_bills(state, week, params.learning.as_ref())?;

    Ok(WeekOutcome {
        spend,
        true_oop,
        theta_mean,
        theta_var: theta.var,
        c_hat,
        belief_mean,
        claim,
    })
}

/// Moves every claim billed by `week` into known OOP, in filing order.
pub fn resolve_bills(state: &mut HouseholdState, week: u32, learning: Option<&LearningParams>) -> Result<()> {
    let mut i = 0;
    while i < state.pending.len() {
        if state.pending[i].is_billed(week) {
            let c = state.pending.remove(i);
            state.known_oop += c.true_oop;
            if let (BiasBelief::Learning(b), Some(lp)) = (&mut state.belief, learning) {
                *b = update_belief(*b, learning_signal_from_z(lp, c.learning_z), lp)?;
            }
        } else {
            i += 1;
        }
    }
    Ok(())
}

/// Random streams for one household-year.
pub struct HouseholdStreams {
    shock: ChaCha8Rng,
    signal: ChaCha8Rng,
    delay: ChaCha8Rng,
    learning: ChaCha8Rng,
    pub prior_z: f64,
}

impl HouseholdStreams {
    pub fn new(seed: u64, replicate: u64, year: u32, household: u64) -> Self {
        let key = |p| StreamKey::new(seed, p).replicate(replicate).year(year as u64).rng(household);
        let mut prior = key(Purpose::Prior);
        Self {
            shock: key(Purpose::Shock),
            signal: key(Purpose::Signal),
            delay: key(Purpose::Delay),
            learning: key(Purpose::Learning),
            prior_z: prior.sample(StandardNormal),
        }
    }

    /// Draws one week. Every stream advances by a fixed amount per week.
    pub fn week(&mut self, pop: &Population, household: &Household, delays: &BillDelayDistribution) -> WeekDraws {
        let shock = pop
            .member_cells(household)
            .map(|cell| cell.shock_at(self.shock.sample(StandardNormal)))
            .sum();
        WeekDraws {
            shock,
            signal_z: self.signal.sample(StandardNormal),
            delay: delays.quantile(self.delay.gen::<f64>()),
            learning_z: self.learning.sample(StandardNormal),
        }
    }
}

/// Initial belief state of a household at the start of a plan year.
pub fn initial_belief(params: &SimParams, prior_z: f64) -> BiasBelief {
    match &params.learning {
        None => BiasBelief::Fixed(params.signal.beta),
        Some(lp) => BiasBelief::Learning(BetaBelief {
            mean: lp.prior_mean + lp.prior_var.sqrt() * prior_z,
            variance: lp.prior_var,
        }),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimulationOutput {
    pub records: Vec<PanelRecord>,
    pub claims: Vec<ClaimRecord>,
    /// Belief about the bias at the start of each record's week.
    pub belief_means: Vec<f64>,
    /// Fingerprint of every random draw consumed. Depends only on the seed,
    /// replicate and population, never on the parameters.
    pub draw_checksum: u64,
}

impl SimulationOutput {
    /// Average belief about the bias by week of year.
    pub fn mean_belief_by_week(&self, weeks: u32) -> Vec<f64> {
        let mut sums = vec![0.0; weeks as usize];
        let mut counts = vec![0usize; weeks as usize];
        for (r, b) in self.records.iter().zip(&self.belief_means) {
            sums[r.week as usize - 1] += b;
            counts[r.week as usize - 1] += 1;
        }
        sums.iter().zip(counts).map(|(s, n)| s / n.max(1) as f64).collect()
    }

    /// Total spending per household-year, keyed by `(household_id, year)`.
    pub fn annual_spend(&self) -> Vec<((u64, u32), f64)> {
        let mut out: Vec<((u64, u32), f64)> = Vec::new();
        for r in &self.records {
            let key = (r.household_id, r.year);
            match out.last_mut() {
                Some((k, total)) if *k == key => *total += r.household_spend(),
                _ => out.push((key, r.household_spend())),
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SimulationSetup<'a> {
    pub population: &'a Population,
    pub delays: &'a BillDelayDistribution,
    pub years: u32,
}

/// Simulates one household over all plan years.
pub fn simulate_household(
    setup: &SimulationSetup<'_>,
    household: &Household,
    params: &SimParams,
    seed: u64,
    replicate: u64,
) -> Result<SimulationOutput> {
    let weeks = household.contract.plan_year_weeks;
    let n = household.size() as u32;
    let mut out = SimulationOutput::default();
    let mut checksum = Checksum::default();
    for year in 1..=setup.years {
        let mut streams = HouseholdStreams::new(seed, replicate, year, household.id);
        checksum.add_f64(streams.prior_z);
        let mut state = HouseholdState::new(household.contract, household.omega, initial_belief(params, streams.prior_z));
        for week in 1..=weeks {
            let draws = streams.week(setup.population, household, setup.delays);
            checksum.add_f64(draws.shock);
            checksum.add_f64(draws.signal_z);
            checksum.add(draws.delay as u64);
            checksum.add_f64(draws.learning_z);
            let o = step_week(&mut state, week, params, draws)?;
            out.records.push(PanelRecord {
                household_id: household.id,
                year,
                week,
                spend_per_person: o.spend / n as f64,
                n_members: n,
                post_service: 0,
                post_bill: 0,
                shoppable_flag: 0,
                true_oop_week: o.true_oop,
                perceived_theta_mean: o.theta_mean,
            });
            out.belief_means.push(o.belief_mean);
            if let Some(c) = o.claim {
                out.claims.push(ClaimRecord {
                    household_id: household.id,
                    year,
                    consumed_week: c.consumed_week,
                    bill_week: c.bill_week,
                    spend: o.spend,
                    true_oop: c.true_oop,
                });
            }
        }
        // Epilogue: remaining bills arrive after the plan year ends.
        resolve_bills(&mut state, weeks + setup.delays.max_delay(), params.learning.as_ref())?;
        debug_assert!(state.pending.is_empty());
    }
    out.draw_checksum = checksum.0;
    Ok(out)
}

/// Simulates every household; output is ordered by household, year, week.
pub fn simulate_panel(setup: &SimulationSetup<'_>, params: &SimParams, seed: u64, replicate: u64) -> Result<SimulationOutput> {
    params.validate()?;
    let parts: Vec<SimulationOutput> = setup
        .population
        .households
        .par_iter()
        .map(|h| simulate_household(setup, h, params, seed, replicate))
        .collect::<Result<_>>()?;
    let mut out = SimulationOutput::default();
    let mut checksum = Checksum::default();
    for p in parts {
        checksum.add(p.draw_checksum);
        out.records.extend(p.records);
        out.claims.extend(p.claims);
        out.belief_means.extend(p.belief_means);
    }
    out.draw_checksum = checksum.0;
    Ok(out)
}
