//! Per-period spending choice under quadratic-loss utility.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Moral hazard parameter: extra spending induced by moving from no
/// insurance to full insurance, dollars per week.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MoralHazardParam(f64);

impl MoralHazardParam {
    pub fn new(omega: f64) -> Result<Self> {
        if omega > 0.0 && omega.is_finite() {
            Ok(Self(omega))
        } else {
            Err(Error::domain(format!("omega must be positive, got {omega}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// First-order condition: `max(0, lambda + omega * (1 - c_hat))`.
pub fn optimal_spending(lambda: f64, omega: MoralHazardParam, c_hat: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&c_hat) {
        return Err(Error::domain(format!("expected marginal cost must lie in [0, 1], got {c_hat}")));
    }
    Ok(optimal_spending_unchecked(lambda, omega.0, c_hat))
}

#[inline]
pub(crate) fn optimal_spending_unchecked(lambda: f64, omega: f64, c_hat: f64) -> f64 {
    (lambda + omega * (1.0 - c_hat)).max(0.0)
}

pub fn utility(m: f64, lambda: f64, omega: MoralHazardParam, oop: f64) -> f64 {
    let gap = m - lambda;
    gap - gap * gap / (2.0 * omega.0) - oop
}

/// Household moral hazard: geometric mean of member values.
pub fn household_omega(member_omegas: &[f64]) -> Result<MoralHazardParam> {
    if member_omegas.is_empty() {
        return Err(Error::domain("household has no members"));
    }
    let mut log_sum = 0.0;
    for &w in member_omegas {
        log_sum += MoralHazardParam::new(w)?.0.ln();
    }
    MoralHazardParam::new((log_sum / member_omegas.len() as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(x: f64) -> MoralHazardParam {
        MoralHazardParam::new(x).unwrap()
    }

    #[test]
    fn spending_examples() {
        assert_eq!(optimal_spending(100.0, w(50.0), 1.0).unwrap(), 100.0);
        assert_eq!(optimal_spending(100.0, w(50.0), 0.0).unwrap(), 150.0);
        assert_eq!(optimal_spending(-80.0, w(50.0), 0.6).unwrap(), 0.0);
        assert!(optimal_spending(1.0, w(50.0), 1.2).is_err());
        assert!(MoralHazardParam::new(0.0).is_err());
    }

    #[test]
    fn utility_at_shock_is_zero() {
        assert_eq!(utility(75.0, 75.0, w(300.0), 0.0), 0.0);
    }

    #[test]
    fn first_order_condition_holds() {
        let (lambda, omega, c) = (120.0, w(300.0), 0.2);
        let m = optimal_spending(lambda, omega, c).unwrap();
        let u = |x: f64| utility(x, lambda, omega, c * x);
        let h = 1e-3;
        let slope = (u(m + h) - u(m - h)) / (2.0 * h);
        assert!(slope.abs() < 1e-6, "{slope}");
        assert!(u(m) >= u(m + 10.0) && u(m) >= u(m - 10.0));
    }

    #[test]
    fn household_omega_is_geometric_mean() {
        assert!((household_omega(&[300.0]).unwrap().get() - 300.0).abs() < 1e-12);
        let e = std::f64::consts::E;
        assert!((household_omega(&[e, e.powi(3)]).unwrap().get() - e * e).abs() < 1e-12);
        assert!((household_omega(&[42.0, 42.0, 42.0]).unwrap().get() - 42.0).abs() < 1e-12);
        assert!(household_omega(&[]).is_err());
        assert!(household_omega(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn deductible_crossing_jump() {
        let omega = w(300.0);
        let below = optimal_spending(50.0, omega, 1.0).unwrap();
        let above = optimal_spending(50.0, omega, 0.2).unwrap();
        assert!((above - below - 300.0 * 0.8).abs() < 1e-12);
    }

    // Maximizer of a concave f on [a, b] by bisection on the sign of a
    // central-difference slope.
    fn concave_argmax(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let h = 1e-3;
        let slope = |x: f64| (f(x + h) - f(x - h)) / (2.0 * h);
        if slope(a) <= 0.0 {
            return a;
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if slope(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    }

    proptest! {
        #[test]
        fn spending_maximizes_utility(lambda in -500.0..2000.0f64, omega in 10.0..1000.0f64, c in 0.0..=1.0f64) {
            let m = optimal_spending(lambda, w(omega), c).unwrap();
            let hi = lambda.max(0.0) + omega + 10.0;
            let oracle = concave_argmax(|x| utility(x, lambda, w(omega), c * x), 0.0, hi);
            prop_assert!((m - oracle).abs() < 1e-6, "{} vs {}", m, oracle);
        }

        #[test]
        fn spending_non_increasing_in_price(lambda in -500.0..2000.0f64, omega in 10.0..1000.0f64, a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(optimal_spending(lambda, w(omega), lo).unwrap() >= optimal_spending(lambda, w(omega), hi).unwrap());
        }
    }
}
