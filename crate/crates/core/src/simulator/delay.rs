use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution of weeks between a service and its bill.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BillDelayDistribution {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

pub const DEFAULT_MAX_DELAY: u32 = 26;
/// Share of bills arriving within four weeks of service.
pub const DEFAULT_SHARE_WITHIN_FOUR_WEEKS: f64 = 0.60;

impl BillDelayDistribution {
    /// Builds a distribution from a pmf over `0..pmf.len()` weeks.
    ///
    /// Inputs must sum to one within 1e-6 and are renormalized exactly.
    pub fn from_pmf(pmf: Vec<f64>) -> Result<Self> {
        if pmf.is_empty() || pmf.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::input("delay pmf must be non-empty with non-negative entries"));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!("delay pmf sums to {total}, expected 1")));
        }
        let pmf: Vec<f64> = pmf.iter().map(|p| p / total).collect();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self { pmf, cdf })
    }

    /// Point mass at `weeks`.
    pub fn degenerate(weeks: u32) -> Self {
        let mut pmf = vec![0.0; weeks as usize + 1];
        pmf[weeks as usize] = 1.0;
        Self::from_pmf(pmf).expect("point mass is a valid pmf")
    }

    /// Geometric delay truncated at `max_delay`, with the success rate chosen
    /// so that `P(delay <= 4) = share_within_four` after truncation.
    pub fn truncated_geometric(share_within_four: f64, max_delay: u32) -> Result<Self> {
        if !(share_within_four > 0.0 && share_within_four < 1.0) || max_delay < 5 {
            return Err(Error::input("geometric delay needs 0 < share < 1 and max_delay >= 5"));
        }
        let within = |p: f64| {
            let q = 1.0 - p;
            (1.0 - q.powi(5)) / (1.0 - q.powi(max_delay as i32 + 1))
        };
        let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if within(mid) < share_within_four {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p = 0.5 * (lo + hi);
        let pmf: Vec<f64> = (0..=max_delay).map(|k| p * (1.0 - p).powi(k as i32)).collect();
        let total: f64 = pmf.iter().sum();
        Self::from_pmf(pmf.into_iter().map(|x| x / total).collect())
    }

    pub fn default_geometric() -> Self {
        Self::truncated_geometric(DEFAULT_SHARE_WITHIN_FOUR_WEEKS, DEFAULT_MAX_DELAY)
            .expect("default delay parameters are valid")
    }

    /// Empirical distribution of observed delays.
    pub fn from_observations(delays: &[u32]) -> Result<Self> {
        let max = *delays
            .iter()
            .max()
            .ok_or_else(|| Error::input("no delays observed"))?;
        let mut counts = vec![0.0; max as usize + 1];
        for &d in delays {
            counts[d as usize] += 1.0;
        }
        let n = delays.len() as f64;
        Self::from_pmf(counts.into_iter().map(|c| c / n).collect())
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn max_delay(&self) -> u32 {
        self.pmf.len() as u32 - 1
    }

    pub fn cdf_at(&self, weeks: u32) -> f64 {
        self.cdf.get(weeks as usize).copied().unwrap_or(1.0)
    }

    /// Delay at uniform quantile `u` in [0, 1).
    pub fn quantile(&self, u: f64) -> u32 {
        self.cdf.partition_point(|&c| c <= u).min(self.pmf.len() - 1) as u32
    }

    /// Reads a pmf CSV with columns `delay_weeks, probability`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        #[derive(Deserialize)]
        struct Row {
            delay_weeks: u32,
            probability: f64,
        }
        let mut pmf = Vec::new();
        for row in csv::Reader::from_path(path)?.deserialize() {
            let row: Row = row?;
            let i = row.delay_weeks as usize;
            if pmf.len() <= i {
                pmf.resize(i + 1, 0.0);
            }
            pmf[i] += row.probability;
        }
        Self::from_pmf(pmf)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["delay_weeks", "probability"])?;
        for (k, p) in self.pmf.iter().enumerate() {
            w.write_record([k.to_string(), format!("{p:.17}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_headline_share() {
        let d = BillDelayDistribution::default_geometric();
        assert_eq!(d.max_delay(), 26);
        assert!((d.cdf_at(4) - 0.60).abs() < 1e-9);
        assert!((d.pmf().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let d = BillDelayDistribution::from_pmf(vec![0.25, 0.5, 0.25]).unwrap();
        assert_eq!(d.quantile(0.0), 0);
        assert_eq!(d.quantile(0.2499), 0);
        assert_eq!(d.quantile(0.25), 1);
        assert_eq!(d.quantile(0.7499), 1);
        assert_eq!(d.quantile(0.75), 2);
        assert_eq!(d.quantile(0.999_999), 2);
        assert_eq!(BillDelayDistribution::degenerate(3).quantile(0.5), 3);
    }

    #[test]
    fn rejects_bad_pmf() {
        assert!(BillDelayDistribution::from_pmf(vec![]).is_err());
        assert!(BillDelayDistribution::from_pmf(vec![0.5, 0.4]).is_err());
        assert!(BillDelayDistribution::from_pmf(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn empirical_and_csv_round_trip() {
        let d = BillDelayDistribution::from_observations(&[0, 2, 2, 3]).unwrap();
        assert_eq!(d.pmf(), &[0.25, 0.0, 0.5, 0.25]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pmf.csv");
        d.write_csv(&path).unwrap();
        assert_eq!(BillDelayDistribution::read_csv(&path).unwrap(), d);
        assert!(matches!(
            BillDelayDistribution::read_csv(&dir.path().join("missing.csv")),
            Err(Error::FileNotFound(_))
        ));
    }
}
