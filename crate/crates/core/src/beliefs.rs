//! Spending signals, perceived position relative to the deductible, and
//! Bayesian learning about the signal bias.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::contract::CostSharingContract;
use crate::error::{Error, Result};

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    /// Multiplicative bias of pre-bill OOP signals.
    pub beta: f64,
    /// Signal noise standard deviation, dollars.
    pub sigma_s: f64,
}

impl SignalParams {
    pub fn new(beta: f64, sigma_s: f64) -> Result<Self> {
        let sp = Self { beta, sigma_s };
        sp.validate()?;
        Ok(sp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) || !(self.sigma_s >= 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::domain(format!(
                "signal parameters need beta > 0 and sigma_s >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Unbiased, noiseless signals.
    pub fn exact() -> Self {
        Self { beta: 1.0, sigma_s: 0.0 }
    }
}

/// A consumed service whose bill has not arrived yet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingClaim {
    pub true_oop: f64,
    /// Realized signal `beta * true_oop + noise`.
    pub signal: f64,
    /// Noise component of the signal, dollars.
    pub noise: f64,
    /// Standard-normal draw for the learning signal released with the bill.
    pub learning_z: f64,
    pub consumed_week: u32,
    pub bill_week: u32,
}

impl PendingClaim {
    pub fn is_billed(&self, week: u32) -> bool {
        week >= self.bill_week
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaBelief {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningParams {
    pub prior_mean: f64,
    pub prior_var: f64,
    pub signal_var: f64,
}

impl LearningParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_var >= 0.0) || !(self.signal_var >= 0.0) || !self.prior_mean.is_finite() {
            return Err(Error::domain(format!(
                "learning variances must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn prior(&self) -> BetaBelief {
        BetaBelief {
            mean: self.prior_mean,
            variance: self.prior_var,
        }
    }
}

/// Perceived cumulative OOP: mean and variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaEstimate {
    pub mean: f64,
    pub var: f64,
}

pub fn signal_from_noise(true_oop: f64, beta: f64, noise: f64) -> f64 {
    beta * true_oop + noise
}

pub fn draw_signal<R: Rng + ?Sized>(true_oop: f64, sp: SignalParams, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    signal_from_noise(true_oop, sp.beta, sp.sigma_s * z)
}

/// Household's view: billed OOP plus the realized signals of unbilled claims.
pub fn perceived_theta(known_oop: f64, pending: &[PendingClaim], sigma_s: f64) -> ThetaEstimate {
    ThetaEstimate {
        mean: known_oop + pending.iter().map(|c| c.signal).sum::<f64>(),
        var: pending.len() as f64 * sigma_s * sigma_s,
    }
}

/// Perceived theta when the bias is the household's current belief rather
/// than the value used when the signal was drawn (learning model).
pub fn perceived_theta_with_belief(
    known_oop: f64,
    pending: &[PendingClaim],
    belief_mean: f64,
    sigma_s: f64,
) -> ThetaEstimate {
    ThetaEstimate {
        mean: known_oop
            + pending
                .iter()
                .map(|c| signal_from_noise(c.true_oop, belief_mean, c.noise))
                .sum::<f64>(),
        var: pending.len() as f64 * sigma_s * sigma_s,
    }
}

/// Modeler's expectation: `known + beta * sum(unbilled true OOP)`.
pub fn expected_theta(known_oop: f64, pending: &[PendingClaim], sp: SignalParams) -> ThetaEstimate {
    ThetaEstimate {
        mean: known_oop + sp.beta * pending.iter().map(|c| c.true_oop).sum::<f64>(),
        var: pending.len() as f64 * sp.sigma_s * sp.sigma_s,
    }
}

/// `Pr(theta <= d)` under a normal perceived position.
#[inline]
pub fn prob_below_deductible(theta_mean: f64, theta_var: f64, deductible: f64) -> f64 {
    if theta_var > 0.0 {
        let z = (deductible - theta_mean) / theta_var.sqrt();
        // Beyond these points the CDF is 0 or 1 to within 1e-17.
        if z > 8.5 {
            1.0
        } else if z < -8.5 {
            0.0
        } else {
            std_normal_cdf(z)
        }
    } else if theta_mean <= deductible {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn expected_marginal_cost(p_below: f64, k: &CostSharingContract) -> f64 {
    p_below + (1.0 - p_below) * k.coinsurance
}

/// Expected marginal cost from a perceived position under contract `k`.
///
/// A contract without a deductible has nothing to be below, so the price is
/// the coinsurance rate regardless of beliefs.
#[inline]
pub fn c_hat(theta_mean: f64, theta_var: f64, k: &CostSharingContract) -> f64 {
    if k.deductible <= 0.0 {
        return k.coinsurance;
    }
    expected_marginal_cost(prob_below_deductible(theta_mean, theta_var, k.deductible), k)
}

/// Normal-normal conjugate update of the belief about beta.
pub fn update_belief(prior: BetaBelief, signal: f64, lp: &LearningParams) -> Result<BetaBelief> {
    let sv = lp.signal_var;
    match (prior.variance > 0.0, sv > 0.0) {
        (true, true) => {
            let precision = 1.0 / prior.variance + 1.0 / sv;
            Ok(BetaBelief {
                mean: (prior.mean / prior.variance + signal / sv) / precision,
                variance: 1.0 / precision,
            })
        }
        (false, true) => Ok(prior),
        (true, false) => Ok(BetaBelief {
            mean: signal,
            variance: 0.0,
        }),
        (false, false) if prior.mean == signal => Ok(prior),
        (false, false) => Err(Error::InconsistentBelief {
            prior_mean: prior.mean,
            signal,
        }),
    }
}

impl BetaBelief {
    /// Posterior after `n` learning signals summing to `signal_sum`.
    ///
    /// Matches `n` sequential [`update_belief`] calls.
    pub fn after_signals(self, n: u32, signal_sum: f64, signal_var: f64) -> BetaBelief {
        if n == 0 || self.variance == 0.0 {
            return self;
        }
        if signal_var == 0.0 {
            return BetaBelief {
                mean: signal_sum / n as f64,
                variance: 0.0,
            };
        }
        let precision = 1.0 / self.variance + n as f64 / signal_var;
        BetaBelief {
            mean: (self.mean / self.variance + signal_sum / signal_var) / precision,
            variance: 1.0 / precision,
        }
    }
}

pub fn learning_signal_from_z(lp: &LearningParams, z: f64) -> f64 {
    1.0 + lp.signal_var.sqrt() * z
}

pub fn draw_learning_signal<R: Rng + ?Sized>(lp: &LearningParams, rng: &mut R) -> f64 {
    learning_signal_from_z(lp, rng.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};
    use proptest::prelude::*;

    fn claim(true_oop: f64, signal: f64) -> PendingClaim {
        PendingClaim {
            true_oop,
            signal,
            noise: signal - true_oop,
            learning_z: 0.0,
            consumed_week: 1,
            bill_week: 3,
        }
    }

    #[test]
    fn noiseless_signal_is_scaled_oop() {
        let mut rng = StreamKey::new(1, Purpose::Signal).rng(0);
        assert_eq!(draw_signal(100.0, SignalParams::new(1.73, 0.0).unwrap(), &mut rng), 173.0);
    }

    #[test]
    fn signal_monte_carlo_mean() {
        let mut rng = StreamKey::new(2, Purpose::Signal).rng(0);
        let sp = SignalParams::new(1.73, 15.2).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| draw_signal(100.0, sp, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 173.0).abs() < 0.5, "{mean}");

        let zero: Vec<f64> = (0..n).map(|_| draw_signal(0.0, sp, &mut rng)).collect();
        let m0 = zero.iter().sum::<f64>() / n as f64;
        let sd0 = (zero.iter().map(|x| (x - m0).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(m0.abs() < 0.5 && (sd0 / 15.2 - 1.0).abs() < 0.02);
    }

    #[test]
    fn perceived_theta_examples() {
        let none = perceived_theta(500.0, &[], 15.0);
        assert_eq!((none.mean, none.var), (500.0, 0.0));
        let one = perceived_theta(500.0, &[claim(200.0, 260.0)], 15.0);
        assert_eq!((one.mean, one.var), (760.0, 225.0));
        let modeler = expected_theta(0.0, &[claim(100.0, 0.0)], SignalParams::new(2.0, 1.0).unwrap());
        assert_eq!(modeler.mean, 200.0);
    }

    #[test]
    fn prob_below_deductible_examples() {
        assert_eq!(prob_below_deductible(1000.0, 4.0, 1000.0), 0.5);
        assert_eq!(prob_below_deductible(900.0, 0.0, 1000.0), 1.0);
        assert_eq!(prob_below_deductible(1100.0, 0.0, 1000.0), 0.0);
        // Phi(1) from standard tables.
        assert!((prob_below_deductible(900.0, 100.0 * 100.0, 1000.0) - 0.841_344_746).abs() < 1e-9);
    }

    #[test]
    fn expected_marginal_cost_examples() {
        let k = CostSharingContract::new(1000.0, 0.2, 3000.0).unwrap();
        assert_eq!(expected_marginal_cost(1.0, &k), 1.0);
        assert_eq!(expected_marginal_cost(0.0, &k), 0.2);
        assert!((expected_marginal_cost(0.5, &k) - 0.6).abs() < 1e-15);
    }

    fn lp(prior_mean: f64, prior_var: f64, signal_var: f64) -> LearningParams {
        LearningParams {
            prior_mean,
            prior_var,
            signal_var,
        }
    }

    #[test]
    fn conjugate_update_example() {
        let p = lp(2.58, 0.12f64.powi(2), 0.09f64.powi(2));
        let post = update_belief(p.prior(), 1.0, &p).unwrap();
        let expect_mean = (2.58 / 0.0144 + 1.0 / 0.0081) / (1.0 / 0.0144 + 1.0 / 0.0081);
        assert!((post.mean - expect_mean).abs() < 1e-12);
        assert!((post.mean - 1.569).abs() < 1e-3);
        assert!((post.variance - 1.0 / (1.0 / 0.0144 + 1.0 / 0.0081)).abs() < 1e-15);
        assert!((post.variance - 0.005_18).abs() < 1e-5);
    }

    #[test]
    fn limiting_updates() {
        let vague = lp(2.0, 0.5, 1e30);
        let post = update_belief(vague.prior(), 1.0, &vague).unwrap();
        assert!((post.mean - 2.0).abs() < 1e-20 + 1e-12 && (post.variance - 0.5).abs() < 1e-12);

        let flat = lp(2.0, 1e30, 0.01);
        let post = update_belief(flat.prior(), 1.2, &flat).unwrap();
        assert!((post.mean - 1.2).abs() < 1e-12);

        let dogmatic = lp(1.0, 0.0, 0.01);
        assert_eq!(update_belief(dogmatic.prior(), 1.7, &dogmatic).unwrap(), dogmatic.prior());

        let exact = lp(2.0, 0.1, 0.0);
        assert_eq!(update_belief(exact.prior(), 1.0, &exact).unwrap().mean, 1.0);

        let both = lp(2.0, 0.0, 0.0);
        assert!(matches!(
            update_belief(both.prior(), 1.0, &both),
            Err(Error::InconsistentBelief { .. })
        ));
        assert!(update_belief(both.prior(), 2.0, &both).is_ok());
    }

    // Brute-force posterior: grid integration of prior x likelihood over [-5, 10].
    fn grid_posterior(prior: BetaBelief, signals: &[f64], signal_var: f64) -> (f64, f64) {
        let n = 300_000;
        let h = 15.0 / n as f64;
        let log_post = |b: f64| {
            let lp = -(b - prior.mean).powi(2) / (2.0 * prior.variance);
            lp + signals.iter().map(|s| -(s - b).powi(2) / (2.0 * signal_var)).sum::<f64>()
        };
        let peak = (0..=n).map(|i| log_post(-5.0 + i as f64 * h)).fold(f64::MIN, f64::max);
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let b = -5.0 + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 } * (log_post(b) - peak).exp();
            z += w;
            m1 += w * b;
            m2 += w * b * b;
        }
        let mean = m1 / z;
        (mean, m2 / z - mean * mean)
    }

    #[test]
    fn conjugate_matches_grid_integration() {
        let cases = [
            (lp(2.58, 0.0144, 0.0081), vec![1.0]),
            (lp(1.5, 0.04, 0.09), vec![0.9, 1.1, 1.3]),
            (lp(2.0, 0.25, 0.5), vec![1.0, 0.8]),
        ];
        for (p, signals) in cases {
            let mut post = p.prior();
            for &s in &signals {
                post = update_belief(post, s, &p).unwrap();
            }
            let (gm, gv) = grid_posterior(p.prior(), &signals, p.signal_var);
            assert!((post.mean - gm).abs() < 1e-6, "{} vs {gm}", post.mean);
            assert!((post.variance - gv).abs() < 1e-6, "{} vs {gv}", post.variance);
        }
    }

    #[test]
    fn learning_signal_draws() {
        let exact = lp(2.0, 0.1, 0.0);
        let mut rng = StreamKey::new(5, Purpose::Learning).rng(0);
        assert_eq!(draw_learning_signal(&exact, &mut rng), 1.0);

        let p = lp(2.0, 0.1, 0.0081);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| draw_learning_signal(&p, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 3.0 * 0.09 / 316.0);
        assert!((var / 0.0081 - 1.0).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn n_step_identity(mu0 in 0.5..3.0f64, v0 in 0.001..1.0f64, sv in 0.001..1.0f64, s in 0.0..2.0f64, n in 1u32..30) {
            let p = lp(mu0, v0, sv);
            let mut post = p.prior();
            for _ in 0..n {
                let next = update_belief(post, s, &p).unwrap();
                prop_assert!(next.variance < post.variance);
                post = next;
            }
            let closed = (mu0 / v0 + n as f64 * s / sv) / (1.0 / v0 + n as f64 / sv);
            prop_assert!((post.mean - closed).abs() < 1e-9);
            let batch = p.prior().after_signals(n, n as f64 * s, sv);
            prop_assert!((batch.mean - post.mean).abs() < 1e-9);
            prop_assert!((batch.variance - post.variance).abs() < 1e-12);
        }

        #[test]
        fn prob_below_is_monotone(var in 0.0..1e4f64, a in 0.0..3000.0f64, b in 0.0..3000.0f64) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(prob_below_deductible(lo, var, 1000.0) >= prob_below_deductible(hi, var, 1000.0));
            if var > 0.0 {
                prop_assert_eq!(prob_below_deductible(1000.0, var, 1000.0), 0.5);
            }
        }

        #[test]
        fn inflated_signals_overstate_position(known in 0.0..2000.0f64, oops in proptest::collection::vec(0.0..500.0f64, 0..6), beta in 1.0..3.0f64) {
            let pending: Vec<PendingClaim> = oops.iter().map(|&o| claim(o, signal_from_noise(o, beta, 0.0))).collect();
            let truth = known + oops.iter().sum::<f64>();
            prop_assert!(perceived_theta(known, &pending, 0.0).mean >= truth - 1e-9);
        }
    }
}
