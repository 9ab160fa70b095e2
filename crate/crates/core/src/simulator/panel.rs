//! Household-week panel records and claim records, with CSV I/O.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One household-week observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub household_id: u64,
    pub year: u32,
    pub week: u32,
    pub spend_per_person: f64,
    pub n_members: u32,
    pub post_service: u8,
    pub post_bill: u8,
    pub shoppable_flag: u8,
    pub true_oop_week: f64,
    pub perceived_theta_mean: f64,
}

impl PanelRecord {
    /// Total household spending for the week.
    pub fn household_spend(&self) -> f64 {
        self.spend_per_person * self.n_members as f64
    }

    pub fn key(&self) -> (u64, u32, u32) {
        (self.household_id, self.year, self.week)
    }
}

/// One billed service: the household's spending in a week with `m > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub household_id: u64,
    pub year: u32,
    pub consumed_week: u32,
    pub bill_week: u32,
    pub spend: f64,
    pub true_oop: f64,
}

impl ClaimRecord {
    pub fn delay(&self) -> u32 {
        self.bill_week - self.consumed_week
    }
}

pub const PANEL_COLUMNS: [&str; 10] = [
    "household_id",
    "year",
    "week",
    "spend_per_person",
    "n_members",
    "post_service",
    "post_bill",
    "shoppable_flag",
    "true_oop_week",
    "perceived_theta_mean",
];

pub const CLAIM_COLUMNS: [&str; 6] = ["household_id", "year", "consumed_week", "bill_week", "spend", "true_oop"];

fn money(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

/// Writes the panel with money columns at two decimals.
pub fn write_panel<W: Write>(records: &[PanelRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PANEL_COLUMNS)?;
    for r in records {
        w.write_record([
            r.household_id.to_string(),
            r.year.to_string(),
            r.week.to_string(),
            money(r.spend_per_person),
            r.n_members.to_string(),
            r.post_service.to_string(),
            r.post_bill.to_string(),
            r.shoppable_flag.to_string(),
            money(r.true_oop_week),
            money(r.perceived_theta_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_panel<R: Read>(input: R) -> Result<Vec<PanelRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(PANEL_COLUMNS.iter().copied()) {
        return Err(Error::input(format!(
            "panel header {:?} does not match expected columns {:?}",
            headers.iter().collect::<Vec<_>>(),
            PANEL_COLUMNS
        )));
    }
    let records: Vec<PanelRecord> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    for r in &records {
        if r.post_bill == 1 && r.post_service != 1 {
            return Err(Error::input(format!(
                "household {} week {}: post_bill set without post_service",
                r.household_id, r.week
            )));
        }
        if r.spend_per_person < 0.0 {
            return Err(Error::input(format!(
                "household {} week {}: negative spending",
                r.household_id, r.week
            )));
        }
    }
    Ok(records)
}

pub fn write_claims<W: Write>(claims: &[ClaimRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CLAIM_COLUMNS)?;
    for c in claims {
        w.write_record([
            c.household_id.to_string(),
            c.year.to_string(),
            c.consumed_week.to_string(),
            c.bill_week.to_string(),
            money(c.spend),
            money(c.true_oop),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_claims<R: Read>(input: R) -> Result<Vec<ClaimRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let claims: Vec<ClaimRecord> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    if let Some(c) = claims.iter().find(|c| c.bill_week < c.consumed_week) {
        return Err(Error::input(format!(
            "claim for household {} week {} is billed before it was consumed",
            c.household_id, c.consumed_week
        )));
    }
    Ok(claims)
}

pub fn write_panel_file(records: &[PanelRecord], path: &Path) -> Result<()> {
    write_panel(records, std::fs::File::create(path)?)
}

pub fn read_panel_file(path: &Path) -> Result<Vec<PanelRecord>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    read_panel(std::fs::File::open(path)?)
}

pub fn write_claims_file(claims: &[ClaimRecord], path: &Path) -> Result<()> {
    write_claims(claims, std::fs::File::create(path)?)
}

pub fn read_claims_file(path: &Path) -> Result<Vec<ClaimRecord>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    read_claims(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(week: u32, spend: f64) -> PanelRecord {
        PanelRecord {
            household_id: 3,
            year: 1,
            week,
            spend_per_person: spend,
            n_members: 2,
            post_service: 1,
            post_bill: 0,
            shoppable_flag: 0,
            true_oop_week: spend * 2.0,
            perceived_theta_mean: -0.001,
        }
    }

    #[test]
    fn panel_csv_layout() {
        let mut buf = Vec::new();
        write_panel(&[record(1, 12.3456)], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "household_id,year,week,spend_per_person,n_members,post_service,post_bill,shoppable_flag,true_oop_week,perceived_theta_mean\n\
             3,1,1,12.35,2,1,0,0,24.69,0.00\n"
        );
        let back = read_panel(buf.as_slice()).unwrap();
        assert_eq!(back[0].spend_per_person, 12.35);
        assert_eq!(back[0].household_spend(), 24.7);
    }

    #[test]
    fn rejects_inconsistent_indicators() {
        let mut r = record(1, 1.0);
        r.post_service = 0;
        r.post_bill = 1;
        let mut buf = Vec::new();
        write_panel(&[r], &mut buf).unwrap();
        assert!(read_panel(buf.as_slice()).is_err());
        assert!(read_panel("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn claims_round_trip() {
        let c = ClaimRecord {
            household_id: 1,
            year: 1,
            consumed_week: 4,
            bill_week: 9,
            spend: 250.0,
            true_oop: 250.0,
        };
        let mut buf = Vec::new();
        write_claims(&[c.clone()], &mut buf).unwrap();
        assert_eq!(read_claims(buf.as_slice()).unwrap(), vec![c]);
        assert!(read_claims("household_id,year,consumed_week,bill_week,spend,true_oop\n1,1,5,4,1.00,1.00\n".as_bytes()).is_err());
    }
}
