//! Seeded synthetic activity logs whose label lives only in event order.
//!
//! Entities come in pairs that share a length, a timestamp sequence and a
//! multiset of purchase amounts. A coin flip decides which member of the pair
//! churns: the churner sees its amounts in decreasing order, the other member
//! in increasing order. Every order-invariant statistic of a pair is therefore
//! identical across the two labels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ColumnKind, ColumnSpec, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    #[default]
    TrendChurn,
    None,
}

impl std::str::FromStr for Signal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trend_churn" => Ok(Signal::TrendChurn),
            "none" => Ok(Signal::None),
            other => Err(Error::Config(format!("unknown signal `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_entities: usize,
    /// Mean number of activities per entity.
    pub t_mean: usize,
    pub seed: u64,
    pub signal: Signal,
    pub item_vocab: usize,
    pub channel_vocab: usize,
    /// Log-space mean and standard deviation of purchase amounts.
    pub amount_mu: f64,
    pub amount_sigma: f64,
    pub mean_gap_days: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 2000,
            t_mean: 8,
            seed: 7,
            signal: Signal::TrendChurn,
            item_vocab: 10,
            channel_vocab: 3,
            amount_mu: 3.0,
            amount_sigma: 0.8,
            mean_gap_days: 7.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities < 2 {
            return Err(Error::Config("n_entities must be at least 2".into()));
        }
        if self.t_mean < 3 {
            return Err(Error::Config("t_mean must be at least 3".into()));
        }
        if self.item_vocab == 0 || self.channel_vocab == 0 {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        if !(self.amount_sigma > 0.0) || !(self.mean_gap_days > 0.0) {
            return Err(Error::Config("amount_sigma and mean_gap_days must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRow {
    pub entity: String,
    pub ts: i64,
    pub amount: f64,
    pub item: String,
    pub channel: String,
    pub age: f64,
    pub tier: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub rows: Vec<SynthRow>,
    /// `(entity, label)` in entity order.
    pub labels: Vec<(String, u8)>,
}

/// Start of the generated calendar: 2023-01-01T00:00:00Z.
const EPOCH: i64 = 1_672_531_200;
const DAY: f64 = 86_400.0;

pub fn schema() -> Schema {
    Schema::new(vec![
        ColumnSpec::new("customer_id", ColumnKind::EntityId),
        ColumnSpec::new("ts", ColumnKind::Timestamp),
        ColumnSpec::new("amount", ColumnKind::Numerical).monetary(),
        ColumnSpec::new("item", ColumnKind::Categorical),
        ColumnSpec::new("channel", ColumnKind::Categorical),
        ColumnSpec::new("age", ColumnKind::StaticNumerical),
        ColumnSpec::new("tier", ColumnKind::StaticCategorical),
    ])
    .expect("built-in schema is valid")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let amounts = LogNormal::new(cfg.amount_mu, cfg.amount_sigma)
        .map_err(|e| Error::Config(e.to_string()))?;
    let gaps = Exp::new(1.0 / cfg.mean_gap_days).map_err(|e| Error::Config(e.to_string()))?;
    let ages = Normal::<f64>::new(40.0, 12.0).expect("valid normal");
    let width = cfg.n_entities.to_string().len().max(5);

    let mut rows = Vec::new();
    let mut labels = Vec::with_capacity(cfg.n_entities);
    let mut e = 0;
    while e < cfg.n_entities {
        let len = rng.random_range(3..=2 * cfg.t_mean - 3);
        let start = EPOCH + (rng.random_range(0.0..365.0) * DAY) as i64;
        let mut ts = Vec::with_capacity(len);
        let mut clock = start as f64;
        for _ in 0..len {
            ts.push(clock as i64);
            clock += gaps.sample(&mut rng) * DAY;
        }
        let mut multiset: Vec<f64> = (0..len)
            .map(|_| (amounts.sample(&mut rng) * 100.0).round() / 100.0)
            .collect();
        multiset.sort_by(f64::total_cmp);
        let first_churns = rng.random_bool(0.5);

        for member in 0..2 {
            if e >= cfg.n_entities {
                break;
            }
            let entity = format!("c{e:0width$}");
            let (label, order): (u8, Vec<f64>) = match cfg.signal {
                Signal::TrendChurn => {
                    let churn = (member == 0) == first_churns;
                    let mut v = multiset.clone();
                    if churn {
                        v.reverse();
                    }
                    (churn as u8, v)
                }
                Signal::None => {
                    let mut v = multiset.clone();
                    for i in (1..v.len()).rev() {
                        v.swap(i, rng.random_range(0..=i));
                    }
                    (rng.random_bool(0.5) as u8, v)
                }
            };
            let age = ages.sample(&mut rng).round().clamp(18.0, 90.0);
            let tier = format!("t{}", rng.random_range(0..3));
            for (i, &amount) in order.iter().enumerate() {
                rows.push(SynthRow {
                    entity: entity.clone(),
                    ts: ts[i],
                    amount,
                    item: format!("i{}", rng.random_range(0..cfg.item_vocab)),
                    channel: format!("ch{}", rng.random_range(0..cfg.channel_vocab)),
                    age,
                    tier: tier.clone(),
                });
            }
            labels.push((entity, label));
            e += 1;
        }
    }
    Ok(SynthData { rows, labels })
}

fn timestamp(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .expect("generated timestamps are in range")
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl SynthData {
    pub fn data_csv(&self) -> String {
        let mut out = String::from("customer_id,ts,amount,item,channel,age,tier\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.2},{},{},{},{}",
                r.entity,
                timestamp(r.ts),
                r.amount,
                r.item,
                r.channel,
                r.age,
                r.tier
            )
            .unwrap();
        }
        out
    }

    pub fn labels_csv(&self) -> String {
        let mut out = String::from("entity,label\n");
        for (e, l) in &self.labels {
            writeln!(out, "{e},{l}").unwrap();
        }
        out
    }

    /// Writes `data.csv`, `schema.json` and `labels.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("data.csv"), self.data_csv())?;
        fs::write(dir.join("schema.json"), schema().to_json() + "\n")?;
        fs::write(dir.join("labels.csv"), self.labels_csv())?;
        Ok(())
    }
}
