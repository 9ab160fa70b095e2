//! Weekly health shocks drawn from shifted lognormal distributions.
//!
//! Each demographic cell carries `(mu, sigma, kappa)` with
//! `log(lambda - kappa) ~ N(mu, sigma^2)`. Cells are calibrated from three
//! summary moments of weekly spending: the mean, the median and the
//! coefficient of variation, using the identities
//!
//! ```text
//! mean      = exp(mu + sigma^2 / 2) + kappa
//! median    = exp(mu) + kappa
//! sd / mean = sqrt(exp(sigma^2) - 1)
//! ```
//!
//! The last identity is the unshifted-lognormal one; with `kappa != 0` the
//! calibrated distribution's actual standard deviation is
//! `(mean - kappa) * sd / mean`, see [`ShockCellParams::distribution_sd`].

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMoments {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockCellParams {
    pub cell_id: String,
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
}

/// Solves the three moment identities for `(mu, sigma, kappa)`.
pub fn calibrate_cell(cell_id: impl Into<String>, mom: CellMoments) -> Result<ShockCellParams> {
    let cell_id = cell_id.into();
    if !(mom.mean > mom.median) {
        return Err(Error::Calibration(format!(
            "cell {cell_id}: mean ({}) must exceed median ({}) for a right-skewed solution",
            mom.mean, mom.median
        )));
    }
    if !(mom.sd > 0.0) || !(mom.mean > 0.0) {
        return Err(Error::Calibration(format!(
            "cell {cell_id}: mean and sd must be positive (mean {}, sd {})",
            mom.mean, mom.sd
        )));
    }
    let cv = mom.sd / mom.mean;
    let sigma2 = cv.mul_add(cv, 1.0).ln();
    let scale = (mom.mean - mom.median) / (sigma2 / 2.0).exp_m1();
    let mu = scale.ln();
    let kappa = mom.median - scale;
    let params = ShockCellParams {
        cell_id,
        mu,
        sigma: sigma2.sqrt(),
        kappa,
    };
    params.validate()?;
    Ok(params)
}

impl ShockCellParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.implied_mean().is_finite() || !self.kappa.is_finite() {
            return Err(Error::Calibration(format!(
                "cell {}: sigma must be positive and the implied mean finite",
                self.cell_id
            )));
        }
        Ok(())
    }

    /// `exp(mu + sigma^2/2) + kappa`.
    pub fn implied_mean(&self) -> f64 {
        (self.mu + 0.5 * self.sigma * self.sigma).exp() + self.kappa
    }

    pub fn implied_median(&self) -> f64 {
        self.mu.exp() + self.kappa
    }

    /// Moments under the calibration identities (inverse of [`calibrate_cell`]).
    pub fn calibration_moments(&self) -> CellMoments {
        let mean = self.implied_mean();
        CellMoments {
            mean,
            median: self.implied_median(),
            sd: mean * (self.sigma * self.sigma).exp_m1().sqrt(),
        }
    }

    /// Standard deviation of the shifted lognormal itself.
    pub fn distribution_sd(&self) -> f64 {
        let s2 = self.sigma * self.sigma;
        (self.mu + 0.5 * s2).exp() * s2.exp_m1().sqrt()
    }

    pub fn distribution_variance(&self) -> f64 {
        self.distribution_sd().powi(2)
    }

    /// Shock at standard-normal quantile `z`.
    #[inline]
    pub fn shock_at(&self, z: f64) -> f64 {
        self.kappa + (self.mu + self.sigma * z).exp()
    }

    pub fn sample_shock<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.shock_at(rng.sample(StandardNormal))
    }
}

/// Sum of independent member shocks for one household-week.
pub fn household_shock<R: Rng + ?Sized>(members: &[&ShockCellParams], rng: &mut R) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::domain("household has no members"));
    }
    Ok(members.iter().map(|cell| cell.sample_shock(rng)).sum())
}

/// Reads a cell moment table with columns `cell_id, mean, median, sd`.
pub fn read_cell_table(path: &Path) -> Result<Vec<ShockCellParams>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    #[derive(Deserialize)]
    struct Row {
        cell_id: String,
        mean: f64,
        median: f64,
        sd: f64,
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut cells = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        cells.push(calibrate_cell(
            row.cell_id,
            CellMoments {
                mean: row.mean,
                median: row.median,
                sd: row.sd,
            },
        )?);
    }
    if cells.is_empty() {
        return Err(Error::input(format!("cell table {} has no rows", path.display())));
    }
    Ok(cells)
}

/// Base weekly per-person moments for the synthetic default cells.
pub const DEFAULT_BASE_MOMENTS: CellMoments = CellMoments {
    mean: 25.0,
    median: -10.0,
    sd: 50.0,
};

const AGE_BANDS: [(&str, f64); 4] = [("0-17", 0.7), ("18-34", 0.85), ("35-49", 1.1), ("50-64", 1.35)];
const SEXES: [(&str, f64); 2] = [("f", 1.05), ("m", 0.95)];
const RISK_QUARTILES: [(&str, f64); 4] = [("q1", 0.5), ("q2", 0.8), ("q3", 1.2), ("q4", 1.5)];

/// Moments for the 4 age bands x 2 sexes x 4 risk quartiles default grid.
///
/// Every cell scales the base moments by the product of its band
/// multipliers, so all cells share `sigma` and the zero-shock share.
pub fn default_cell_moments(base: CellMoments) -> Vec<(String, CellMoments)> {
    let mut out = Vec::with_capacity(32);
    for (age, a) in AGE_BANDS {
        for (sex, s) in SEXES {
            for (risk, r) in RISK_QUARTILES {
                let f = a * s * r;
                out.push((
                    format!("{age}/{sex}/{risk}"),
                    CellMoments {
                        mean: base.mean * f,
                        median: base.median * f,
                        sd: base.sd * f,
                    },
                ));
            }
        }
    }
    out
}

pub fn default_cells(base: CellMoments) -> Result<Vec<ShockCellParams>> {
    default_cell_moments(base)
        .into_iter()
        .map(|(id, m)| calibrate_cell(id, m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};
    use statrs::distribution::{ContinuousCDF, Normal};

    fn example() -> ShockCellParams {
        calibrate_cell("x", CellMoments { mean: 100.0, median: 50.0, sd: 150.0 }).unwrap()
    }

    // Independent solve of the three moment equations by bisection on sigma^2:
    // given sigma^2 from the CV identity, (mean - median) = e^mu (e^{s2/2} - 1).
    fn oracle_solve(m: CellMoments) -> (f64, f64, f64) {
        let target = (m.sd / m.mean).powi(2);
        let (mut lo, mut hi) = (1e-9, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f64::exp(mid) - 1.0 < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s2 = 0.5 * (lo + hi);
        let emu = (m.mean - m.median) / (f64::exp(s2 / 2.0) - 1.0);
        (emu.ln(), s2.sqrt(), m.median - emu)
    }

    #[test]
    fn calibrates_worked_example() {
        let p = example();
        assert!((p.sigma * p.sigma - 3.25f64.ln()).abs() < 1e-12);
        assert!((p.sigma * p.sigma - 1.17865).abs() < 1e-5);
        assert!((p.mu - 4.1317).abs() < 1e-4);
        assert!((p.kappa - (-12.28)).abs() < 5e-3);
        let (mu, sigma, kappa) = oracle_solve(CellMoments { mean: 100.0, median: 50.0, sd: 150.0 });
        assert!((p.mu - mu).abs() < 1e-9);
        assert!((p.sigma - sigma).abs() < 1e-9);
        assert!((p.kappa - kappa).abs() < 1e-7);
    }

    #[test]
    fn calibration_identities_round_trip() {
        for (_, m) in default_cell_moments(DEFAULT_BASE_MOMENTS)
            .into_iter()
            .chain([(String::new(), CellMoments { mean: 100.0, median: 50.0, sd: 150.0 })])
        {
            let p = calibrate_cell("c", m).unwrap();
            let back = p.calibration_moments();
            assert!((back.mean - m.mean).abs() <= 1e-9 * m.mean.abs().max(1.0));
            assert!((back.median - m.median).abs() <= 1e-9 * m.mean.abs().max(1.0));
            assert!((back.sd - m.sd).abs() <= 1e-9 * m.sd);
        }
    }

    #[test]
    fn degenerate_skew_is_rejected() {
        let err = calibrate_cell("x", CellMoments { mean: 50.0, median: 50.0, sd: 10.0 });
        assert!(matches!(err, Err(Error::Calibration(_))));
        assert!(calibrate_cell("x", CellMoments { mean: 40.0, median: 50.0, sd: 10.0 }).is_err());
        assert!(calibrate_cell("x", CellMoments { mean: 60.0, median: 50.0, sd: 0.0 }).is_err());
    }

    #[test]
    fn monte_carlo_round_trip() {
        let p = example();
        let mut rng = StreamKey::new(1, Purpose::Shock).rng(0);
        let n = 1_000_000;
        let mut draws: Vec<f64> = (0..n).map(|_| p.sample_shock(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        draws.sort_by(f64::total_cmp);
        let median = 0.5 * (draws[n / 2 - 1] + draws[n / 2]);
        assert!((mean / 100.0 - 1.0).abs() < 0.01, "mean {mean}");
        assert!((median / 50.0 - 1.0).abs() < 0.01, "median {median}");
        let sd = var.sqrt();
        assert!((sd / p.distribution_sd() - 1.0).abs() < 0.02, "sd {sd} vs {}", p.distribution_sd());
    }

    #[test]
    fn shock_quantiles() {
        let p = example();
        assert!((p.shock_at(0.0) - 50.0).abs() < 1e-9);
        assert!((p.shock_at(-40.0) - p.kappa).abs() < 1e-9);
        let mut rng = StreamKey::new(2, Purpose::Shock).rng(0);
        let mut draws: Vec<f64> = (0..100_000).map(|_| p.sample_shock(&mut rng)).collect();
        draws.sort_by(f64::total_cmp);
        let median = draws[50_000];
        assert!((median / p.implied_median() - 1.0).abs() < 0.02);
    }

    #[test]
    fn household_shock_sums_members() {
        let p = example();
        let mut rng = StreamKey::new(3, Purpose::Shock).rng(0);
        assert!(household_shock(&[], &mut rng).is_err());

        let n = 200_000;
        let pair: Vec<f64> = (0..n).map(|_| household_shock(&[&p, &p], &mut rng).unwrap()).collect();
        let mean = pair.iter().sum::<f64>() / n as f64;
        let var = pair.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean / (2.0 * p.implied_mean()) - 1.0).abs() < 0.02);
        assert!((var / (2.0 * p.distribution_variance()) - 1.0).abs() < 0.1);

        let mut a = StreamKey::new(4, Purpose::Shock).rng(0);
        let mut b = StreamKey::new(4, Purpose::Shock).rng(0);
        assert_eq!(household_shock(&[&p], &mut a).unwrap(), p.sample_shock(&mut b));
    }

    #[test]
    fn default_cells_zero_share() {
        let cells = default_cells(DEFAULT_BASE_MOMENTS).unwrap();
        assert_eq!(cells.len(), 32);
        let std = Normal::new(0.0, 1.0).unwrap();
        for c in &cells {
            let zero = std.cdf(((-c.kappa).ln() - c.mu) / c.sigma);
            assert!((0.5..0.7).contains(&zero), "{} zero share {zero}", c.cell_id);
        }
    }
}
