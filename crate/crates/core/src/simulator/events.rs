//! Index events: the first large service of each household plan-year.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::panel::{ClaimRecord, PanelRecord};
use crate::error::{Error, Result};
use crate::stats::quantile;

/// Which claims count as an index event.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    /// Minimum household spending of a qualifying claim. `None` uses the
    /// 75th percentile of weekly household spending in the panel.
    pub threshold: Option<f64>,
}

pub const DEFAULT_EVENT_QUANTILE: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEvent {
    pub household_id: u64,
    pub year: u32,
    pub service_week: u32,
    pub bill_week: u32,
}

impl EventSpec {
    pub fn resolve_threshold(&self, records: &[PanelRecord]) -> f64 {
        self.threshold.unwrap_or_else(|| {
            let spend: Vec<f64> = records.iter().map(PanelRecord::household_spend).collect();
            quantile(&spend, DEFAULT_EVENT_QUANTILE)
        })
    }
}

/// Finds the first qualifying claim per household-year.
pub fn find_index_events(claims: &[ClaimRecord], threshold: f64) -> Vec<IndexEvent> {
    let mut first: BTreeMap<(u64, u32), IndexEvent> = BTreeMap::new();
    for c in claims {
        if c.spend > 0.0 && c.spend >= threshold {
            let e = IndexEvent {
                household_id: c.household_id,
                year: c.year,
                service_week: c.consumed_week,
                bill_week: c.bill_week,
            };
            first
                .entry((c.household_id, c.year))
                .and_modify(|cur| {
                    if e.service_week < cur.service_week {
                        *cur = e;
                    }
                })
                .or_insert(e);
        }
    }
    first.into_values().collect()
}

/// Sets `post_service`, `post_bill` and `shoppable_flag` from the index
/// events and returns the events used. Weeks without an event are zeroed.
pub fn mark_index_events(records: &mut [PanelRecord], claims: &[ClaimRecord], spec: &EventSpec) -> Vec<IndexEvent> {
    let threshold = spec.resolve_threshold(records);
    let events = find_index_events(claims, threshold);
    apply_events(records, &events);
    events
}

pub fn apply_events(records: &mut [PanelRecord], events: &[IndexEvent]) {
    let by_key: BTreeMap<(u64, u32), &IndexEvent> = events.iter().map(|e| ((e.household_id, e.year), e)).collect();
    for r in records {
        let (s, b, f) = match by_key.get(&(r.household_id, r.year)) {
            Some(e) => (
                (r.week >= e.service_week) as u8,
                (r.week >= e.bill_week) as u8,
                (r.week == e.service_week) as u8,
            ),
            None => (0, 0, 0),
        };
        r.post_service = s;
        r.post_bill = b;
        r.shoppable_flag = f;
    }
}

pub fn write_events<W: Write>(events: &[IndexEvent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if events.is_empty() {
        w.write_record(["household_id", "year", "service_week", "bill_week"])?;
    }
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events<R: Read>(input: R) -> Result<Vec<IndexEvent>> {
    let mut events = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let e: IndexEvent = row?;
        if e.bill_week < e.service_week {
            return Err(Error::input(format!("event {e:?} is billed before its service")));
        }
        events.push(e);
    }
    Ok(events)
}

pub fn write_events_file(events: &[IndexEvent], path: &Path) -> Result<()> {
    write_events(events, std::fs::File::create(path)?)
}

pub fn read_events_file(path: &Path) -> Result<Vec<IndexEvent>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    read_events(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn household(weeks: u32, spend: &[(u32, f64)]) -> Vec<PanelRecord> {
        (1..=weeks)
            .map(|week| PanelRecord {
                household_id: 7,
                year: 1,
                week,
                spend_per_person: spend.iter().find(|(w, _)| *w == week).map_or(0.0, |(_, s)| *s),
                n_members: 1,
                post_service: 1,
                post_bill: 1,
                shoppable_flag: 1,
                true_oop_week: 0.0,
                perceived_theta_mean: 0.0,
            })
            .collect()
    }

    fn claim(consumed: u32, bill: u32, spend: f64) -> ClaimRecord {
        ClaimRecord {
            household_id: 7,
            year: 1,
            consumed_week: consumed,
            bill_week: bill,
            spend,
            true_oop: spend,
        }
    }

    #[test]
    fn no_qualifying_claim() {
        let mut p = household(20, &[(3, 50.0)]);
        let ev = mark_index_events(&mut p, &[claim(3, 5, 50.0)], &EventSpec { threshold: Some(100.0) });
        assert!(ev.is_empty());
        assert!(p.iter().all(|r| r.post_service == 0 && r.post_bill == 0 && r.shoppable_flag == 0));
    }

    #[test]
    fn same_week_bill_flips_together() {
        let mut p = household(20, &[(6, 500.0)]);
        mark_index_events(&mut p, &[claim(6, 6, 500.0)], &EventSpec { threshold: Some(100.0) });
        assert!(p.iter().all(|r| r.post_service == r.post_bill));
        assert_eq!(p[5].post_service, 1);
        assert_eq!(p[4].post_service, 0);
    }

    #[test]
    fn service_ten_bill_fourteen() {
        let mut p = household(52, &[(10, 900.0), (12, 2000.0)]);
        let claims = [claim(2, 4, 30.0), claim(10, 14, 900.0), claim(12, 13, 2000.0)];
        let ev = mark_index_events(&mut p, &claims, &EventSpec { threshold: Some(500.0) });
        assert_eq!(ev, vec![IndexEvent { household_id: 7, year: 1, service_week: 10, bill_week: 14 }]);
        for r in &p {
            assert_eq!(r.post_service, (r.week >= 10) as u8);
            assert_eq!(r.post_bill, (r.week >= 14) as u8);
            assert_eq!(r.shoppable_flag, (r.week == 10) as u8);
            assert!(r.post_bill <= r.post_service);
        }
    }

    #[test]
    fn default_threshold_is_upper_quartile() {
        let p = household(4, &[(1, 10.0), (2, 20.0), (3, 30.0), (4, 40.0)]);
        assert!((EventSpec::default().resolve_threshold(&p) - 32.5).abs() < 1e-12);
    }

    #[test]
    fn events_csv_round_trip() {
        let events = vec![
            IndexEvent { household_id: 3, year: 1, service_week: 10, bill_week: 14 },
            IndexEvent { household_id: 8, year: 2, service_week: 2, bill_week: 2 },
        ];
        let mut buf = Vec::new();
        write_events(&events, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("household_id,year,service_week,bill_week\n"));
        assert_eq!(read_events(&buf[..]).unwrap(), events);
        let mut empty = Vec::new();
        write_events(&[], &mut empty).unwrap();
        assert!(read_events(&empty[..]).unwrap().is_empty());
        assert!(read_events("household_id,year,service_week,bill_week\n1,1,5,4\n".as_bytes()).is_err());
    }
}
