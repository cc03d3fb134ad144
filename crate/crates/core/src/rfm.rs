//! Recency / frequency / monetary baseline features.
//!
//! Durations are in fractional days. Weeks are ISO (Monday-start) weeks and
//! months are calendar months, both in UTC, spanning the first activity to
//! the reference time; empty periods count as zero. Standard deviations use
//! the population convention (divide by n).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, Datelike};

use crate::error::{Error, Result};
use crate::ingest::{parse_timestamp, RawRecord, Schema};

pub const FEATURE_NAMES: [&str; 19] = [
    "days_since_latest",
    "days_since_first",
    "days_first_to_last",
    "gap_min",
    "gap_max",
    "gap_mean",
    "gap_std",
    "weekly_count_mean",
    "weekly_count_std",
    "monthly_count_mean",
    "monthly_count_std",
    "amount_min",
    "amount_max",
    "amount_mean",
    "amount_std",
    "weekly_spend_mean",
    "weekly_spend_std",
    "monthly_spend_mean",
    "monthly_spend_std",
];

pub type RfmVector = [f64; 19];

/// One activity: epoch seconds and amount.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activity {
    pub ts: i64,
    pub amount: f64,
}

const DAY: f64 = 86_400.0;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// Monday-start week number since the epoch (1970-01-01 was a Thursday).
fn week_of(ts: i64) -> i64 {
    (ts.div_euclid(86_400) + 3).div_euclid(7)
}

fn month_of(ts: i64) -> i64 {
    let d = DateTime::from_timestamp(ts, 0).expect("timestamp in range");
    d.year() as i64 * 12 + d.month0() as i64
}

/// Count and spend per period from the first activity's period to the
/// reference period, inclusive.
fn bucket_stats(acts: &[Activity], reference_ts: i64, period: fn(i64) -> i64) -> [f64; 4] {
    let first = period(acts[0].ts);
    let last = period(reference_ts);
    let n = (last - first + 1) as usize;
    let mut counts = vec![0.0; n];
    let mut spend = vec![0.0; n];
    for a in acts {
        let i = (period(a.ts) - first) as usize;
        counts[i] += 1.0;
        spend[i] += a.amount;
    }
    let (cm, cs) = mean_std(&counts);
    let (sm, ss) = mean_std(&spend);
    [cm, cs, sm, ss]
}

pub fn rfm_features(activities: &[Activity], reference_ts: i64) -> Result<RfmVector> {
    if activities.is_empty() {
        return Err(Error::EmptyEntity);
    }
    let mut acts = activities.to_vec();
    acts.sort_by(|a, b| a.ts.cmp(&b.ts).then(a.amount.total_cmp(&b.amount)));
    let (first, latest) = (acts[0].ts, acts[acts.len() - 1].ts);
    if reference_ts < latest {
        return Err(Error::ContractViolation(
            "reference time precedes the latest activity".into(),
        ));
    }

    let gaps: Vec<f64> = acts
        .windows(2)
        .map(|w| (w[1].ts - w[0].ts) as f64 / DAY)
        .collect();
    let (gap_min, gap_max) = if gaps.is_empty() { (0.0, 0.0) } else { min_max(&gaps) };
    let (gap_mean, gap_std) = mean_std(&gaps);

    let amounts: Vec<f64> = acts.iter().map(|a| a.amount).collect();
    let (amount_min, amount_max) = min_max(&amounts);
    let (amount_mean, amount_std) = mean_std(&amounts);

    let [wc_mean, wc_std, ws_mean, ws_std] = bucket_stats(&acts, reference_ts, week_of);
    let [mc_mean, mc_std, ms_mean, ms_std] = bucket_stats(&acts, reference_ts, month_of);

    Ok([
        (reference_ts - latest) as f64 / DAY,
        (reference_ts - first) as f64 / DAY,
        (latest - first) as f64 / DAY,
        gap_min,
        gap_max,
        gap_mean,
        gap_std,
        wc_mean,
        wc_std,
        mc_mean,
        mc_std,
        amount_min,
        amount_max,
        amount_mean,
        amount_std,
        ws_mean,
        ws_std,
        ms_mean,
        ms_std,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfmTable {
    pub entities: Vec<String>,
    pub rows: Vec<RfmVector>,
    pub reference_ts: i64,
}

/// Features for every entity, with the reference time one day after the
/// latest activity in the dataset. Entities are sorted by id.
pub fn rfm_table(records: &[RawRecord], schema: &Schema) -> Result<RfmTable> {
    let amount_col = schema.monetary_index().ok_or_else(|| {
        Error::SchemaMismatch("schema has no column with role `monetary`".into())
    })?;
    let (ei, ti) = (schema.entity_index(), schema.timestamp_index());
    let amount_name = &schema.columns()[amount_col].name;

    let mut by_entity: BTreeMap<&str, Vec<Activity>> = BTreeMap::new();
    for rec in records {
        if rec.fields.len() != schema.columns().len() {
            return Err(Error::Parse {
                row: rec.row,
                msg: format!(
                    "expected {} fields, found {}",
                    schema.columns().len(),
                    rec.fields.len()
                ),
            });
        }
        let ts = parse_timestamp(&rec.fields[ti]).ok_or_else(|| Error::Parse {
            row: rec.row,
            msg: format!("`{}` is not a timestamp", rec.fields[ti]),
        })?;
        let amount: f64 = rec.fields[amount_col]
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Parse {
                row: rec.row,
                msg: format!("column `{amount_name}`: `{}` is not a number", rec.fields[amount_col]),
            })?;
        by_entity
            .entry(rec.fields[ei].as_str())
            .or_default()
            .push(Activity { ts, amount });
    }
    let reference_ts = by_entity
        .values()
        .flatten()
        .map(|a| a.ts)
        .max()
        .ok_or(Error::EmptyDataset)?
        + 86_400;
    let mut table = RfmTable {
        entities: Vec::with_capacity(by_entity.len()),
        rows: Vec::with_capacity(by_entity.len()),
        reference_ts,
    };
    for (entity, acts) in by_entity {
        table.rows.push(rfm_features(&acts, reference_ts)?);
        table.entities.push(entity.to_string());
    }
    Ok(table)
}

impl RfmTable {
    pub fn header() -> String {
        std::iter::once("entity")
            .chain(FEATURE_NAMES)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header();
        out.push('\n');
        for (e, row) in self.entities.iter().zip(&self.rows) {
            out.push_str(e);
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}
