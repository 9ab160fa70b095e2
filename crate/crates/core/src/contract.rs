//! Piecewise-linear cost sharing.
//!
//! Deductible and OOP-max thresholds are tracked in out-of-pocket dollars at
//! the household (family) level. The marginal rate is 1 below the deductible,
//! the coinsurance rate between the deductible and the OOP max, and 0 above.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for comparisons against contract thresholds, in dollars.
pub const MONEY_TOL: f64 = 1e-9;

pub const DEFAULT_PLAN_YEAR_WEEKS: u32 = 52;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSharingContract {
    pub deductible: f64,
    pub coinsurance: f64,
    pub oop_max: f64,
    pub plan_year_weeks: u32,
}

/// Cumulative household spending and out-of-pocket payments to date.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpendingPosition {
    pub cumulative_total: f64,
    pub cumulative_oop: f64,
}

impl SpendingPosition {
    pub fn new(cumulative_total: f64, cumulative_oop: f64) -> Self {
        Self {
            cumulative_total,
            cumulative_oop,
        }
    }

    /// Position with only an OOP balance, which is all the cost schedule reads.
    pub fn at_oop(cumulative_oop: f64) -> Self {
        Self::new(cumulative_oop, cumulative_oop)
    }
}

impl CostSharingContract {
    pub fn new(deductible: f64, coinsurance: f64, oop_max: f64) -> Result<Self> {
        let k = Self {
            deductible,
            coinsurance,
            oop_max,
            plan_year_weeks: DEFAULT_PLAN_YEAR_WEEKS,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn with_weeks(mut self, weeks: u32) -> Result<Self> {
        self.plan_year_weeks = weeks;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.deductible.is_finite() && self.deductible >= 0.0) {
            return Err(Error::Contract(format!(
                "deductible must be a non-negative amount, got {}",
                self.deductible
            )));
        }
        if !(0.0..=1.0).contains(&self.coinsurance) {
            return Err(Error::Contract(format!(
                "coinsurance must lie in [0, 1], got {}",
                self.coinsurance
            )));
        }
        if !(self.oop_max >= self.deductible) {
            return Err(Error::Contract(format!(
                "oop_max ({}) must be at least the deductible ({})",
                self.oop_max, self.deductible
            )));
        }
        if self.plan_year_weeks == 0 {
            return Err(Error::Contract("plan_year_weeks must be positive".into()));
        }
        Ok(())
    }

    /// Marginal share of the next dollar of spending paid out of pocket.
    pub fn marginal_rate(&self, pos: SpendingPosition) -> f64 {
        let oop = pos.cumulative_oop;
        if oop < self.deductible - MONEY_TOL {
            1.0
        } else if oop < self.oop_max - MONEY_TOL {
            self.coinsurance
        } else {
            0.0
        }
    }

    /// Out-of-pocket cost of spending `m` starting from `pos`.
    ///
    /// Integrates the marginal rate along the accumulation path, so a single
    /// claim can straddle the deductible and the OOP max.
    pub fn oop_cost(&self, m: f64, pos: SpendingPosition) -> Result<f64> {
        if !(m >= 0.0) {
            return Err(Error::domain(format!("spending must be non-negative, got {m}")));
        }
        Ok(self.oop_cost_unchecked(m, pos.cumulative_oop))
    }

    pub(crate) fn oop_cost_unchecked(&self, m: f64, oop: f64) -> f64 {
        let deductible_room = (self.deductible.min(self.oop_max) - oop).max(0.0);
        let full_price = m.min(deductible_room);
        let after = oop + full_price;
        let cap_room = (self.oop_max - after).max(0.0);
        let shared = ((m - full_price) * self.coinsurance).min(cap_room);
        full_price + shared
    }

    /// Position after a claim of `m`, along with the claim's OOP cost.
    pub fn advance(&self, pos: SpendingPosition, m: f64) -> Result<(SpendingPosition, f64)> {
        let cost = self.oop_cost(m, pos)?;
        Ok((
            SpendingPosition::new(pos.cumulative_total + m, pos.cumulative_oop + cost),
            cost,
        ))
    }

    pub fn remaining_deductible(&self, pos: SpendingPosition) -> f64 {
        (self.deductible - pos.cumulative_oop).max(0.0)
    }

    /// Checks that `pos` is reachable under this contract.
    pub fn check_position(&self, pos: SpendingPosition) -> Result<()> {
        let ok = pos.cumulative_oop >= 0.0
            && pos.cumulative_total >= 0.0
            && pos.cumulative_oop <= pos.cumulative_total + MONEY_TOL
            && pos.cumulative_oop <= self.oop_max + MONEY_TOL;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("position {pos:?} is not valid under {self:?}")))
        }
    }
}
