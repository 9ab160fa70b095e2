//! Reduced-form bill effects on simulated panels.
//!
//! All designs regress weekly spending per household member on indicators
//! with a household fixed effect (absorbed), year and week-of-year dummies,
//! and standard errors clustered by household. The week of the index service
//! itself is left out, so the indicators measure spillover spending.
//!
//! Spending after a large service follows its own path for reasons that have
//! nothing to do with the bill (the deductible is suddenly met, the shock
//! cell shifts). The triple difference therefore also carries one dummy per
//! week since the service, `since_service=2` up to `since_service=8+`, with
//! the first week after the service as the level captured by `post_service`.
//! The post-bill coefficient is identified from variation in billing delays.

pub mod poisson;

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::simulator::{BillDelayDistribution, IndexEvent, PanelRecord};
use crate::stats;

pub use poisson::{poisson_fit, Coefficient, FitResult, RegressionSpec, Table};

pub const OUTCOME: &str = "spend_per_person";
pub const HOUSEHOLD: &str = "household_id";
pub const DEFAULT_EVENT_WINDOW: u32 = 4;
/// Weeks since service at and beyond which the service-time dummies are pooled.
pub const SERVICE_TIME_BINS: u32 = 8;

/// Panel columns as a regression table.
pub fn panel_table(records: &[PanelRecord]) -> Result<Table> {
    let col = |f: &dyn Fn(&PanelRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    Table::new(records.len())
        .with(HOUSEHOLD, col(&|r| r.household_id as f64))?
        .with("year", col(&|r| r.year as f64))?
        .with("week", col(&|r| r.week as f64))?
        .with(OUTCOME, col(&|r| r.spend_per_person))?
        .with("n_members", col(&|r| r.n_members as f64))?
        .with("post_service", col(&|r| r.post_service as f64))?
        .with("post_bill", col(&|r| r.post_bill as f64))?
        .with("shoppable_flag", col(&|r| r.shoppable_flag as f64))
}

fn bill_design(regressors: &[&str]) -> RegressionSpec {
    RegressionSpec::new(OUTCOME, regressors)
        .absorb(HOUSEHOLD)
        .fixed_effects(&["year", "week"])
        .cluster(HOUSEHOLD)
}

fn service_time_column(k: u32) -> String {
    if k == SERVICE_TIME_BINS {
        format!("since_service={k}+")
    } else {
        format!("since_service={k}")
    }
}

/// Names of the service-time control columns.
pub fn service_time_columns() -> Vec<String> {
    (2..=SERVICE_TIME_BINS).map(service_time_column).collect()
}

/// Specification of the triple-difference regression.
pub fn triple_diff_spec() -> RegressionSpec {
    let mut names = service_time_columns();
    names.extend(["post_service".to_string(), "post_bill".to_string()]);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    bill_design(&refs)
}

/// Adds the service-time dummies, locating each service at the first week
/// flagged `post_service`.
fn add_service_time(table: &mut Table, records: &[PanelRecord]) -> Result<()> {
    let mut service: BTreeMap<(u64, u32), u32> = BTreeMap::new();
    for r in records.iter().filter(|r| r.post_service == 1) {
        let w = service.entry((r.household_id, r.year)).or_insert(r.week);
        *w = (*w).min(r.week);
    }
    let since: Vec<Option<u32>> = records
        .iter()
        .map(|r| service.get(&(r.household_id, r.year)).map(|&s| r.week.saturating_sub(s)))
        .collect();
    for k in 2..=SERVICE_TIME_BINS {
        let col = since
            .iter()
            .map(|s| f64::from(s.map_or(false, |s| if k == SERVICE_TIME_BINS { s >= k } else { s == k })))
            .collect();
        table.insert(service_time_column(k), col)?;
    }
    Ok(())
}

fn triple_diff_input(records: &[PanelRecord]) -> Result<Table> {
    let mut table = panel_table(records)?;
    add_service_time(&mut table, records)?;
    Ok(table.filter(&spillover_rows(records)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleDiff {
    pub beta_post_service: f64,
    pub beta_post_bill: f64,
    pub fit: FitResult,
}

fn spillover_rows(records: &[PanelRecord]) -> Vec<bool> {
    records.iter().map(|r| r.shoppable_flag == 0).collect()
}

fn triple_diff_table(table: &Table) -> Result<TripleDiff> {
    let fit = poisson_fit(table, &triple_diff_spec())?;
    Ok(TripleDiff {
        beta_post_service: fit.estimate("post_service")?,
        beta_post_bill: fit.estimate("post_bill")?,
        fit,
    })
}

/// Poisson regression of spending on post-service and post-bill indicators.
pub fn triple_diff(records: &[PanelRecord]) -> Result<TripleDiff> {
    triple_diff_table(&triple_diff_input(records)?)
}

/// Index events recovered from the panel indicators. A bill that arrives
/// after the plan year is placed in the week after the last observed week.
pub fn events_from_panel(records: &[PanelRecord]) -> Vec<IndexEvent> {
    let mut by_unit: BTreeMap<(u64, u32), (Option<u32>, Option<u32>, u32)> = BTreeMap::new();
    for r in records {
        let e = by_unit.entry((r.household_id, r.year)).or_insert((None, None, 0));
        if r.post_service == 1 {
            e.0 = Some(e.0.map_or(r.week, |w| w.min(r.week)));
        }
        if r.post_bill == 1 {
            e.1 = Some(e.1.map_or(r.week, |w| w.min(r.week)));
        }
        e.2 = e.2.max(r.week);
    }
    by_unit
        .into_iter()
        .filter_map(|((household_id, year), (service, bill, last))| {
            service.map(|service_week| IndexEvent {
                household_id,
                year,
                service_week,
                bill_week: bill.unwrap_or(last + 1),
            })
        })
        .collect()
}

fn event_lookup(events: &[IndexEvent]) -> BTreeMap<(u64, u32), &IndexEvent> {
    events.iter().map(|e| ((e.household_id, e.year), e)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventPoint {
    /// Weeks relative to the bill; endpoints collect everything beyond the window.
    pub k: i64,
    pub gamma: f64,
    pub se: f64,
    pub z: f64,
    pub effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventStudy {
    pub window: u32,
    pub points: Vec<EventPoint>,
    pub fit: FitResult,
}

fn event_column(k: i64) -> String {
    format!("k={k}")
}

/// Weekly effects of the bill relative to the week before it arrives, on the
/// post-service weeks of households with an index event.
pub fn event_study(records: &[PanelRecord], events: &[IndexEvent], window: u32) -> Result<EventStudy> {
    if window == 0 {
        return Err(Error::input("event-study window must be at least 1"));
    }
    let lookup = event_lookup(events);
    let t = window as i64;
    let mut rows = Vec::new();
    let mut rel = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(e) = lookup.get(&(r.household_id, r.year)) {
            if r.week > e.service_week {
                rows.push(i);
                rel.push((r.week as i64 - e.bill_week as i64).clamp(-t, t));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::input("no post-service weeks for any index event"));
    }
    let mut keep = vec![false; records.len()];
    rows.iter().for_each(|&i| keep[i] = true);
    let mut table = panel_table(records)?.filter(&keep);
    let ks: Vec<i64> = (-t..=t).filter(|&k| k != -1).collect();
    for &k in &ks {
        table.insert(event_column(k), rel.iter().map(|&r| f64::from(r == k)).collect())?;
    }
    let names: Vec<String> = ks.iter().map(|&k| event_column(k)).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let fit = poisson_fit(&table, &bill_design(&refs))?;
    let points = ks
        .iter()
        .zip(&fit.coefficients)
        .map(|(&k, c)| EventPoint {
            k,
            gamma: c.estimate,
            se: c.se,
            z: c.z,
            effect: c.effect,
        })
        .collect();
    Ok(EventStudy { window, points, fit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placebo {
    /// Post-bill coefficient at the actual bill timing.
    pub actual: f64,
    pub draws: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub p05: f64,
    pub p95: f64,
    /// Share of placebo coefficients at or below the actual one.
    pub actual_rank: f64,
}

/// Triple-difference post-bill coefficients with every event's bill moved to
/// the service week plus a fresh delay draw.
pub fn placebo(
    records: &[PanelRecord],
    events: &[IndexEvent],
    delays: &BillDelayDistribution,
    n_draws: usize,
    seed: u64,
) -> Result<Placebo> {
    if n_draws == 0 {
        return Err(Error::input("placebo needs at least one draw (n_draws = 0 gives an empty distribution)"));
    }
    let keep = spillover_rows(records);
    let table = triple_diff_input(records)?;
    let actual = triple_diff_table(&table)?.beta_post_bill;

    let mut sorted: Vec<IndexEvent> = events.to_vec();
    sorted.sort_by_key(|e| (e.household_id, e.year));
    let index: BTreeMap<(u64, u32), usize> = sorted.iter().enumerate().map(|(i, e)| ((e.household_id, e.year), i)).collect();
    let row_event: Vec<Option<(usize, u32)>> = records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| index.get(&(r.household_id, r.year)).map(|&e| (e, r.week)))
        .collect();

    let draws = (0..n_draws as u64)
        .into_par_iter()
        .map(|d| {
            let mut rng = StreamKey::new(seed, Purpose::Placebo).replicate(d).rng(0);
            let bills: Vec<u32> = sorted
                .iter()
                .map(|e| e.service_week + delays.quantile(rng.gen::<f64>()))
                .collect();
            let post_bill = row_event
                .iter()
                .map(|re| re.map_or(0.0, |(e, week)| f64::from(week >= bills[e])))
                .collect();
            let mut t = table.clone();
            t.insert("post_bill", post_bill)?;
            Ok(triple_diff_table(&t)?.beta_post_bill)
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(Placebo {
        actual,
        mean: stats::mean(&draws),
        sd: stats::sd(&draws),
        p05: stats::quantile(&draws, 0.05),
        p95: stats::quantile(&draws, 0.95),
        actual_rank: draws.iter().filter(|&&b| b <= actual).count() as f64 / draws.len() as f64,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::events::apply_events;

    /// Panel where spending drops by `drop` after the bill arrives.
    fn toy_panel(households: u64, drop: f64, delay: u32) -> (Vec<PanelRecord>, Vec<IndexEvent>) {
        let mut records = Vec::new();
        let mut events = Vec::new();
        for h in 0..households {
            let service = 10 + (h % 7) as u32;
            let bill = service + delay + (h % 3) as u32;
            events.push(IndexEvent {
                household_id: h,
                year: 1,
                service_week: service,
                bill_week: bill,
            });
            for week in 1..=52u32 {
                let base = 50.0 + (h % 5) as f64 * 10.0 + ((week * 7 + h as u32 * 3) % 11) as f64;
                let mut spend = base;
                if week >= service {
                    spend *= 1.2;
                }
                if week >= bill {
                    spend *= 1.0 - drop;
                }
                records.push(PanelRecord {
                    household_id: h,
                    year: 1,
                    week,
                    spend_per_person: spend,
                    n_members: 2,
                    post_service: 0,
                    post_bill: 0,
                    shoppable_flag: 0,
                    true_oop_week: 0.0,
                    perceived_theta_mean: 0.0,
                });
            }
        }
        apply_events(&mut records, &events);
        (records, events)
    }

    #[test]
    fn triple_diff_recovers_multiplicative_effects() {
        let (records, _) = toy_panel(40, 0.1, 3);
        let td = triple_diff(&records).unwrap();
        assert!((td.beta_post_service - 1.2f64.ln()).abs() < 0.02, "{}", td.beta_post_service);
        assert!((td.beta_post_bill - 0.9f64.ln()).abs() < 0.02, "{}", td.beta_post_bill);
        assert_eq!(td.fit.clusters, 40);
    }

    #[test]
    fn identical_indicators_are_rank_deficient() {
        let (mut records, _) = toy_panel(20, 0.1, 0);
        for r in &mut records {
            r.post_bill = r.post_service;
        }
        match triple_diff(&records) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, "post_bill"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn events_round_trip_through_indicators() {
        let (records, events) = toy_panel(15, 0.1, 2);
        assert_eq!(events_from_panel(&records), events);
    }

    #[test]
    fn event_study_window_one_has_two_dummies() {
        let (records, events) = toy_panel(30, 0.1, 2);
        let es = event_study(&records, &events, 1).unwrap();
        assert_eq!(es.points.iter().map(|p| p.k).collect::<Vec<_>>(), [0, 1]);
        assert!(event_study(&records, &events, 0).is_err());
    }

    #[test]
    fn event_study_finds_the_drop() {
        let (records, events) = toy_panel(60, 0.2, 2);
        let es = event_study(&records, &events, 3).unwrap();
        assert_eq!(es.points.len(), 6);
        for p in es.points.iter().filter(|p| p.k >= 0) {
            assert!((p.gamma - 0.8f64.ln()).abs() < 0.05, "{p:?}");
        }
        for p in es.points.iter().filter(|p| p.k < -1) {
            assert!(p.gamma.abs() < 0.05, "{p:?}");
        }
    }

    #[test]
    fn fixed_delay_is_absorbed_by_service_time() {
        let (mut records, mut events) = toy_panel(25, 0.1, 2);
        for e in &mut events {
            e.bill_week = e.service_week + 2;
        }
        apply_events(&mut records, &events);
        match triple_diff(&records) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, "post_bill"),
            other => panic!("{other:?}"),
        }
        assert!(placebo(&records, &events, &BillDelayDistribution::degenerate(2), 0, 3).is_err());
    }

    #[test]
    fn service_time_dummies_partition_late_weeks() {
        let (records, _) = toy_panel(10, 0.1, 2);
        let mut t = panel_table(&records).unwrap();
        add_service_time(&mut t, &records).unwrap();
        let names = service_time_columns();
        assert_eq!(names.last().unwrap(), "since_service=8+");
        for (i, r) in records.iter().enumerate() {
            let total: f64 = names.iter().map(|n| t.column(n).unwrap()[i]).sum();
            let service = 10 + (r.household_id % 7) as u32;
            assert_eq!(total, f64::from(r.week >= service + 2), "{r:?}");
        }
    }

    #[test]
    fn placebo_is_deterministic() {
        let (records, events) = toy_panel(25, 0.1, 2);
        let d = BillDelayDistribution::default_geometric();
        let a = placebo(&records, &events, &d, 6, 8).unwrap();
        let b = placebo(&records, &events, &d, 6, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.mean.abs() < a.actual.abs());
    }
}
